#include "pag/sampler.hpp"

#include <cmath>
#include <string>

namespace pag {

ImageBatch predict_x0_with(double alpha_bar, const ImageBatch& x_t, const ImageBatch& eps) {
  require_same_shape(x_t, eps, "predict_x0");
  const double noise = std::sqrt(1.0 - alpha_bar);
  const double signal = std::sqrt(alpha_bar);
  ImageBatch out(x_t.count(), x_t.side());
  const auto& x = x_t.values();
  const auto& e = eps.values();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (x[i] - noise * e[i]) / signal;
  return out;
}

ImageBatch predict_x0(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                      const ImageBatch& eps) {
  return predict_x0_with(schedule.alpha_bar(t), x_t, eps);
}

ImageBatch ddpm_step(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                     const ImageBatch& eps_tilde, const ImageBatch* z) {
  require_same_shape(x_t, eps_tilde, "ddpm_step");
  if (z != nullptr) require_same_shape(x_t, *z, "ddpm_step");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double eps_coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double sigma = schedule.sigma(t);
  ImageBatch out(x_t.count(), x_t.side());
  const auto& x = x_t.values();
  const auto& e = eps_tilde.values();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = inv_sqrt_alpha * (x[i] - eps_coef * e[i]);
    if (z != nullptr) o[i] += sigma * z->values()[i];
  }
  return out;
}

ImageBatch ddim_step(const NoiseSchedule& schedule, const ImageBatch& x_t, int t, int t_prev,
                     const ImageBatch& eps_tilde) {
  if (t_prev < 0 || t_prev >= t) {
    throw ConfigError("ddim step grid is not strictly decreasing (" + std::to_string(t) + " -> " +
                      std::to_string(t_prev) + ")");
  }
  const ImageBatch x0 = predict_x0(schedule, x_t, t, eps_tilde);
  const double ab_prev = schedule.alpha_bar_or_one(t_prev);
  if (ab_prev == 1.0) return x0;
  const double signal = std::sqrt(ab_prev);
  const double noise = std::sqrt(1.0 - ab_prev);
  ImageBatch out(x_t.count(), x_t.side());
  const auto& a = x0.values();
  const auto& e = eps_tilde.values();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = signal * a[i] + noise * e[i];
  return out;
}

std::vector<int> ddim_timesteps(int total_steps, int steps) {
  if (steps < 1 || steps > total_steps) {
    throw ConfigError("sampler.steps: must lie in [1, " + std::to_string(total_steps) + "]");
  }
  std::vector<int> grid(static_cast<std::size_t>(steps));
  for (int k = 1; k <= steps; ++k) {
    grid[static_cast<std::size_t>(k - 1)] =
        static_cast<int>(static_cast<long long>(k) * total_steps / steps);
  }
  return grid;
}

std::string_view to_string(SamplerKind kind) {
  return kind == SamplerKind::ddpm ? "ddpm" : "ddim";
}

SamplerKind parse_sampler_kind(std::string_view name) {
  if (name == "ddpm") return SamplerKind::ddpm;
  if (name == "ddim") return SamplerKind::ddim;
  throw ConfigError("sampler.kind: unknown sampler '" + std::string(name) + "'");
}

std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, const SamplerConfig& sampler) {
  std::vector<int> order;
  if (sampler.kind == SamplerKind::ddpm) {
    for (int t = schedule.steps(); t >= 1; --t) order.push_back(t);
  } else {
    const auto grid = ddim_timesteps(schedule.steps(), sampler.steps);
    order.assign(grid.rbegin(), grid.rend());
  }
  return order;
}

namespace {

void draw_chunk_noise(std::vector<RngStream>& streams, ImageBatch& out) {
  for (std::size_t i = 0; i < out.count(); ++i) streams[i].fill_gaussian(out.image(i));
}

}  // namespace

SampleResult sample_loop(const Denoiser& model, const NoiseSchedule& schedule,
                         const SampleRequest& request, const StepHook& hook) {
  const auto& cfg = model.config();
  const auto& guide = request.guidance;
  guide.validate(cfg.num_blocks);
  if (request.cls < -1 || request.cls > cfg.num_classes) {
    throw InputError("class index " + std::to_string(request.cls) + " outside [0, " +
                     std::to_string(cfg.num_classes) + "]");
  }
  const int cls = request.cls < 0 ? cfg.null_class() : request.cls;
  if (guide.needs_null() && cls == cfg.null_class()) {
    throw ConfigError("guidance.mode " + std::string(to_string(guide.mode)) +
                      " needs a conditioning class (sampler.class)");
  }
  if (request.trace_stride < 1) throw ConfigError("trace.stride: must be >= 1");

  const auto order = sampling_timesteps(schedule, request.sampler);
  const std::size_t total = order.size();
  const std::size_t side = static_cast<std::size_t>(cfg.image_side);
  const std::size_t stride = static_cast<std::size_t>(request.trace_stride);

  SampleResult result{ImageBatch(request.count, side), std::nullopt};
  if (request.trace) {
    SampleTrace trace;
    trace.guided = guide.mode != GuidanceMode::none;
    for (std::size_t i = 0; i < total; i += stride) {
      trace.timesteps.push_back(order[i]);
      for (auto* v : {&trace.x_t, &trace.eps, &trace.eps_hat, &trace.eps_tilde, &trace.delta,
                      &trace.x0_hat}) {
        v->emplace_back(request.count, side);
      }
    }
    result.trace = std::move(trace);
  }

  const std::size_t chunks =
      request.threads > 1 ? std::min(request.threads, std::max<std::size_t>(request.count, 1)) : 1;
  const PerturbationSpec plain;
  const int null_cls = cfg.null_class();

  parallel_for(chunks, chunks, [&](std::size_t chunk) {
    const std::size_t begin = request.count * chunk / chunks;
    const std::size_t end = request.count * (chunk + 1) / chunks;
    const std::size_t n = end - begin;
    if (n == 0) return;
    std::vector<RngStream> streams;
    streams.reserve(n);
    for (std::size_t c = begin; c < end; ++c) streams.emplace_back(request.seed, c);

    ImageBatch x(n, side);
    draw_chunk_noise(streams, x);
    ImageBatch z(n, side);
    for (std::size_t i = 0; i < total; ++i) {
      const int t = order[i];
      const bool active = guide.active_at(i, total);
      ImageBatch eps = model.forward(x, t, cls, plain);
      ImageBatch eps_hat;
      ImageBatch eps_tilde;
      if (!active) {
        eps_tilde = eps;
      } else if (guide.mode == GuidanceMode::pag) {
        eps_hat = model.forward(x, t, std::span<const int>(&cls, 1), guide.perturbation);
        eps_tilde = pag_combine(eps, eps_hat, guide.pag_scale);
      } else if (guide.mode == GuidanceMode::cfg) {
        eps_hat = model.forward(x, t, null_cls, plain);
        eps_tilde = cfg_combine(eps, eps_hat, guide.cfg_scale);
      } else {
        const ImageBatch eps_null = model.forward(x, t, null_cls, plain);
        eps_hat = model.forward(x, t, std::span<const int>(&cls, 1), guide.perturbation);
        eps_tilde = combined(eps, eps_null, eps_hat, guide.cfg_scale, guide.pag_scale);
      }

      ImageBatch next;
      if (request.sampler.kind == SamplerKind::ddpm) {
        if (t > 1) {
          draw_chunk_noise(streams, z);
          next = ddpm_step(schedule, x, t, eps_tilde, &z);
        } else {
          next = ddpm_step(schedule, x, t, eps_tilde, nullptr);
        }
      } else {
        const int t_prev = i + 1 < total ? order[i + 1] : 0;
        next = ddim_step(schedule, x, t, t_prev, eps_tilde);
      }
      if (hook) hook(next, x, t, eps, begin);
      if (!all_finite(next.values())) {
        throw NumericError("non-finite sampler state at t=" + std::to_string(t),
                           static_cast<long>(i));
      }

      if (result.trace && i % stride == 0) {
        auto& tr = *result.trace;
        const std::size_t r = i / stride;
        const ImageBatch& hat = eps_hat.empty() ? eps : eps_hat;
        tr.x_t[r].assign_slice(begin, x);
        tr.eps[r].assign_slice(begin, eps);
        tr.eps_hat[r].assign_slice(begin, hat);
        tr.eps_tilde[r].assign_slice(begin, eps_tilde);
        tr.delta[r].assign_slice(begin, delta_map(eps, hat));
        tr.x0_hat[r].assign_slice(begin, predict_x0(schedule, x, t, eps_tilde));
      }
      x = std::move(next);
    }
    result.images.assign_slice(begin, x);
  });
  return result;
}

}  // namespace pag
