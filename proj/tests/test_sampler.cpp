#include <doctest.h>

#include <cmath>

#include "pag/sampler.hpp"

using namespace pag;

namespace {

ImageBatch scalar(double v) { return ImageBatch(1, 1, std::vector<double>{v}); }

const NoiseSchedule& default_schedule() {
  static const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
  return s;
}

const Denoiser& test_model() {
  static const Denoiser model(init_weights(DenoiserConfig{}, 0, true));
  return model;
}

SampleRequest pag_request(double s, std::size_t count = 16) {
  SampleRequest r;
  r.count = count;
  r.guidance.mode = GuidanceMode::pag;
  r.guidance.pag_scale = s;
  r.guidance.perturbation = PerturbationSpec::identity({2});
  return r;
}

}  // namespace

TEST_CASE("predict_x0 examples") {
  CHECK(predict_x0_with(0.25, scalar(-0.36602540378443864676), scalar(-1.0)).values()[0] ==
        doctest::Approx(1.0).epsilon(1e-15));
  const auto& s = default_schedule();
  const ImageBatch x(2, 3, 0.75);
  const auto x0 = predict_x0(s, x, 40, ImageBatch(2, 3));
  for (double v : x0.values()) CHECK(v == 0.75 / std::sqrt(s.alpha_bar(40)));
}

TEST_CASE("ddpm_step scalar oracle") {
  const NoiseSchedule s({0.2, 0.1});
  REQUIRE(s.alpha(2) == doctest::Approx(0.9));
  REQUIRE(s.alpha_bar(2) == doctest::Approx(0.72));
  const double out = ddpm_step(s, scalar(0.5), 2, scalar(0.2), nullptr).values()[0];
  const long double a = 1.0L - static_cast<long double>(s.beta(2));
  const long double ab = (1.0L - static_cast<long double>(s.beta(1))) * a;
  const long double oracle = (0.5L - (static_cast<long double>(s.beta(2)) / std::sqrt(1.0L - ab)) * 0.2L) / std::sqrt(a);
  CHECK(std::abs(out - static_cast<double>(oracle)) <= 1e-12);
  CHECK(out == doctest::Approx(0.48721).epsilon(1e-5));

  const auto z = scalar(1.5);
  const double noisy = ddpm_step(s, scalar(0.5), 2, scalar(0.2), &z).values()[0];
  CHECK(std::abs(noisy - (out + std::sqrt(0.1) * 1.5)) <= 1e-12);
}

TEST_CASE("ddpm_step is a no-op as beta vanishes") {
  const NoiseSchedule s({1e-14, 1e-14});
  const double out = ddpm_step(s, scalar(0.3), 2, scalar(0.7), nullptr).values()[0];
  CHECK(std::abs(out - 0.3) < 1e-6);
}

TEST_CASE("ddim_step final jump returns x0_hat") {
  const auto& s = default_schedule();
  RngStream rng(1);
  ImageBatch x(2, 4), e(2, 4);
  rng.fill_gaussian(x.values());
  rng.fill_gaussian(e.values());
  CHECK(ddim_step(s, x, 4, 0, e) == predict_x0(s, x, 4, e));
}

TEST_CASE("ddim_step with the true noise lands on the forward process") {
  const auto& s = default_schedule();
  RngStream rng(2);
  ImageBatch x0(3, 8), e(3, 8);
  rng.fill_gaussian(x0.values());
  rng.fill_gaussian(e.values());
  for (auto [t, tp] : {std::pair{100, 96}, std::pair{50, 10}, std::pair{8, 1}}) {
    const auto stepped = ddim_step(s, q_sample(s, x0, t, e), t, tp, e);
    const auto direct = q_sample(s, x0, tp, e);
    for (std::size_t i = 0; i < direct.size(); ++i) {
      CHECK(std::abs(stepped.values()[i] - direct.values()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("ddim_step scalar oracle") {
  const auto& s = default_schedule();
  const double out = ddim_step(s, scalar(0.4), 60, 20, scalar(-0.8)).values()[0];
  const long double ab = s.alpha_bar(60), abp = s.alpha_bar(20);
  const long double x0 = (0.4L + std::sqrt(1.0L - ab) * 0.8L) / std::sqrt(ab);
  const long double oracle = std::sqrt(abp) * x0 - std::sqrt(1.0L - abp) * 0.8L;
  CHECK(std::abs(out - static_cast<double>(oracle)) <= 1e-15);
  CHECK_THROWS_AS(ddim_step(s, scalar(0.4), 20, 20, scalar(0.0)), ConfigError);
  CHECK_THROWS_AS(ddim_step(s, scalar(0.4), 20, 30, scalar(0.0)), ConfigError);
}

TEST_CASE("ddim grid is evenly spaced and ends at T") {
  const auto grid = ddim_timesteps(100, 25);
  REQUIRE(grid.size() == 25);
  for (int k = 0; k < 25; ++k) CHECK(grid[k] == 4 * (k + 1));
  CHECK(ddim_timesteps(100, 3) == std::vector<int>{33, 66, 100});
  CHECK(ddim_timesteps(7, 7) == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
  CHECK_THROWS_AS(ddim_timesteps(10, 11), ConfigError);
  CHECK_THROWS_AS(ddim_timesteps(10, 0), ConfigError);
  SamplerConfig ddpm{SamplerKind::ddpm, 25};
  const auto order = sampling_timesteps(default_schedule(), ddpm);
  CHECK(order.size() == 100);
  CHECK(order.front() == 100);
  CHECK(order.back() == 1);
}

TEST_CASE("pag at s=0 reproduces unguided sampling bitwise") {
  SampleRequest none;
  none.count = 8;
  for (auto kind : {SamplerKind::ddim, SamplerKind::ddpm}) {
    none.sampler.kind = kind;
    auto guided = pag_request(0.0, 8);
    guided.sampler.kind = kind;
    CHECK(sample_loop(test_model(), default_schedule(), none).images ==
          sample_loop(test_model(), default_schedule(), guided).images);
  }
}

TEST_CASE("pag with condition drop is cfg") {
  for (double g : {0.5, 1.0, 3.0, 7.5}) {
    SampleRequest pag;
    pag.count = 6;
    pag.cls = 1;
    pag.trace = true;
    pag.guidance.mode = GuidanceMode::pag;
    pag.guidance.pag_scale = g;
    pag.guidance.perturbation = PerturbationSpec::condition_drop();
    SampleRequest cfg = pag;
    cfg.guidance.mode = GuidanceMode::cfg;
    cfg.guidance.cfg_scale = g;
    cfg.guidance.perturbation = PerturbationSpec::identity({});
    const auto a = sample_loop(test_model(), default_schedule(), pag);
    const auto b = sample_loop(test_model(), default_schedule(), cfg);
    CHECK(a.images == b.images);
    CHECK(a.trace->x_t == b.trace->x_t);
    CHECK(a.trace->eps_tilde == b.trace->eps_tilde);
  }
}

TEST_CASE("golden regression hash") {
  const auto out = sample_loop(test_model(), default_schedule(), pag_request(1.0));
  CHECK(hash_values(out.images.values()) == 0x1ac10c412284fe11ull);
}

TEST_CASE("sampling is deterministic and independent of the worker count") {
  auto request = pag_request(1.5, 10);
  request.trace = true;
  request.seed = 9;
  const auto serial = sample_loop(test_model(), default_schedule(), request);
  const auto again = sample_loop(test_model(), default_schedule(), request);
  CHECK(serial.images == again.images);
  for (std::size_t threads : {2u, 4u, 16u}) {
    request.threads = threads;
    const auto parallel = sample_loop(test_model(), default_schedule(), request);
    CHECK(parallel.images == serial.images);
    CHECK(parallel.trace->x_t == serial.trace->x_t);
    CHECK(parallel.trace->delta == serial.trace->delta);
  }
  request.threads = 0;
  request.seed = 10;
  CHECK(!(sample_loop(test_model(), default_schedule(), request).images == serial.images));
}

TEST_CASE("chains match regardless of batch size") {
  auto big = pag_request(1.0, 6);
  auto small = pag_request(1.0, 3);
  const auto a = sample_loop(test_model(), default_schedule(), big).images;
  const auto b = sample_loop(test_model(), default_schedule(), small).images;
  CHECK(a.slice(0, 3) == b);
}

TEST_CASE("forward evaluations per step") {
  const auto& model = test_model();
  struct Case {
    GuidanceMode mode;
    std::uint64_t per_step;
  };
  for (auto c : {Case{GuidanceMode::none, 1}, Case{GuidanceMode::pag, 2}, Case{GuidanceMode::cfg, 2},
                 Case{GuidanceMode::cfg_plus_pag, 3}}) {
    SampleRequest r = pag_request(1.0, 4);
    r.cls = 0;
    r.guidance.mode = c.mode;
    r.guidance.cfg_scale = 2.0;
    const_cast<Denoiser&>(model).reset_evaluations();
    sample_loop(model, default_schedule(), r);
    CHECK(model.evaluations() == 25 * c.per_step);
  }
  SampleRequest windowed = pag_request(1.0, 4);
  windowed.guidance.window_end = 0.6;
  const_cast<Denoiser&>(model).reset_evaluations();
  sample_loop(model, default_schedule(), windowed);
  CHECK(model.evaluations() == 15 * 2 + 10 * 1);
}

TEST_CASE("steps outside the guidance window use the plain prediction") {
  auto late = pag_request(2.0, 4);
  late.trace = true;
  late.guidance.window_start = 0.6;
  SampleRequest none = late;
  none.guidance.mode = GuidanceMode::none;
  const auto g = sample_loop(test_model(), default_schedule(), late);
  const auto n = sample_loop(test_model(), default_schedule(), none);
  for (std::size_t i = 0; i < 25; ++i) {
    if (i < 15) {
      CHECK(g.trace->eps_tilde[i] == g.trace->eps[i]);
      CHECK(g.trace->eps_tilde[i] == n.trace->eps_tilde[i]);
      CHECK(g.trace->x_t[i] == n.trace->x_t[i]);
    } else {
      CHECK(!(g.trace->eps_tilde[i] == g.trace->eps[i]));
    }
  }
  CHECK(!(g.images == n.images));
}

TEST_CASE("trace records agree with offline recomputation") {
  auto r = pag_request(1.0, 5);
  r.trace = true;
  r.trace_stride = 3;
  const auto out = sample_loop(test_model(), default_schedule(), r);
  const auto& tr = *out.trace;
  CHECK(tr.guided);
  REQUIRE(tr.timesteps.size() == 9);
  for (std::size_t i = 0; i < tr.timesteps.size(); ++i) {
    if (i > 0) CHECK(tr.timesteps[i] < tr.timesteps[i - 1]);
    CHECK(tr.timesteps[i] == 100 - 4 * 3 * static_cast<int>(i));
    CHECK(tr.x0_hat[i] == predict_x0(default_schedule(), tr.x_t[i], tr.timesteps[i], tr.eps_tilde[i]));
    CHECK(tr.delta[i] == delta_map(tr.eps[i], tr.eps_hat[i]));
    CHECK(tr.eps_tilde[i] == pag_combine(tr.eps[i], tr.eps_hat[i], 1.0));
    CHECK(tr.x_t[i].same_shape(out.images));
  }
}

TEST_CASE("unguided traces carry no perturbed branch") {
  SampleRequest r;
  r.count = 2;
  r.trace = true;
  const auto out = sample_loop(test_model(), default_schedule(), r);
  CHECK(!out.trace->guided);
  for (std::size_t i = 0; i < out.trace->timesteps.size(); ++i) {
    CHECK(out.trace->eps_hat[i] == out.trace->eps[i]);
    for (double v : out.trace->delta[i].values()) CHECK(v == 0.0);
  }
}

TEST_CASE("ddpm final step injects no noise") {
  SampleRequest r;
  r.count = 3;
  r.sampler.kind = SamplerKind::ddpm;
  const auto& s = default_schedule();
  int calls = 0;
  bool checked = false;
  const auto out = sample_loop(test_model(), s, r,
                               [&](ImageBatch& next, const ImageBatch& x, int t, const ImageBatch& eps,
                                   std::size_t) {
                                 ++calls;
                                 if (t == 1) {
                                   CHECK(next == ddpm_step(s, x, 1, eps, nullptr));
                                   checked = true;
                                 }
                               });
  CHECK(calls == 100);
  CHECK(checked);
}

TEST_CASE("sampler argument checks") {
  SampleRequest cfg;
  cfg.guidance.mode = GuidanceMode::cfg;
  CHECK_THROWS_AS(sample_loop(test_model(), default_schedule(), cfg), ConfigError);
  SampleRequest bad_class;
  bad_class.cls = 4;
  CHECK_THROWS_AS(sample_loop(test_model(), default_schedule(), bad_class), InputError);
  SampleRequest bad_layers = pag_request(1.0);
  bad_layers.guidance.perturbation.layers = {5};
  CHECK_THROWS_AS(sample_loop(test_model(), default_schedule(), bad_layers), ConfigError);
}

TEST_CASE("non-finite state aborts with the step index") {
  auto weights = init_weights(DenoiserConfig{}, 1, true);
  const Denoiser model(weights);
  SampleRequest r;
  r.count = 2;
  int step = -1;
  try {
    sample_loop(model, default_schedule(), r,
                [&](ImageBatch& next, const ImageBatch&, int t, const ImageBatch&, std::size_t) {
                  if (t == 52) next.values()[0] = std::nan("");
                });
  } catch (const NumericError& e) {
    step = static_cast<int>(e.step());
  }
  CHECK(step == 12);
}
