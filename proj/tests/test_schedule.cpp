#include <doctest.h>

#include <cmath>

#include "pag/common.hpp"
#include "pag/sampler.hpp"
#include "pag/schedule.hpp"

using namespace pag;

namespace {

ImageBatch random_batch(std::size_t n, std::size_t side, std::uint64_t seed) {
  ImageBatch b(n, side);
  RngStream rng(seed);
  rng.fill_gaussian(b.values());
  return b;
}

}  // namespace

TEST_CASE("single-step schedule") {
  const auto s = make_linear_schedule(1, 0.5, 0.5);
  CHECK(s.steps() == 1);
  CHECK(s.beta(1) == 0.5);
  CHECK(s.alpha_bar(1) == 0.5);
  CHECK(s.sigma(1) == std::sqrt(0.5));
}

TEST_CASE("four-step schedule matches the hand-multiplied running product") {
  const auto s = make_linear_schedule(4, 0.1, 0.4);
  const double expected[] = {0.9, 0.72, 0.504, 0.3024};
  for (int t = 1; t <= 4; ++t) {
    CHECK(s.alpha_bar(t) == doctest::Approx(expected[t - 1]).epsilon(1e-14));
    CHECK(s.sigma(t) * s.sigma(t) == doctest::Approx(s.beta(t)).epsilon(1e-15));
  }
  CHECK(s.beta(1) == 0.1);
  CHECK(s.beta(4) == 0.4);
}

TEST_CASE("T=100 alpha_bar agrees with an extended-precision product") {
  const int T = 100;
  const auto s = make_linear_schedule(T, 1e-4, 0.02);
  long double running = 1.0L;
  for (int i = 0; i < T; ++i) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / (T - 1);
    running *= 1.0L - beta;
  }
  CHECK(std::abs(s.alpha_bar(T) - static_cast<double>(running)) / static_cast<double>(running) < 1e-12);
  // Frozen from a 50-digit evaluation of the same product.
  CHECK(std::abs(s.alpha_bar(T) - 0.36356324805549190768) / 0.36356324805549190768 < 1e-12);
}

TEST_CASE("schedule invariants") {
  const auto s = make_linear_schedule(250, 1e-4, 0.02);
  double running = 1.0;
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
    running *= s.alpha(t);
    CHECK(std::abs(s.alpha_bar(t) - running) <= 1e-12 * running);
    CHECK(std::sqrt(s.beta(t)) == s.sigma(t));
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar_or_one(0) == 1.0);
}

TEST_CASE("invalid schedule ranges name the offending field") {
  auto message = [](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([] { make_linear_schedule(0, 0.1, 0.2); }).find("schedule.T") != std::string::npos);
  CHECK(message([] { make_linear_schedule(10, 0.0, 0.2); }).find("beta_start") != std::string::npos);
  CHECK(message([] { make_linear_schedule(10, 0.1, 1.0); }).find("beta_end") != std::string::npos);
  CHECK(message([] { make_linear_schedule(10, 0.3, 0.2); }).find("beta_end") != std::string::npos);
  const auto s = make_linear_schedule(10, 0.1, 0.2);
  CHECK_THROWS_AS(s.alpha_bar(0), InputError);
  CHECK_THROWS_AS(s.alpha_bar(11), InputError);
}

TEST_CASE("q_sample limits and scalar example") {
  const ImageBatch x0(1, 1, std::vector<double>{1.0});
  const ImageBatch eps(1, 1, std::vector<double>{-1.0});
  CHECK(q_sample_with(1.0, x0, eps) == x0);
  CHECK(q_sample_with(0.0, x0, eps) == eps);
  const auto y = q_sample_with(0.25, x0, eps);
  CHECK(y.values()[0] == doctest::Approx(-0.36602540378443864676).epsilon(1e-15));
}

TEST_CASE("q_sample rejects mismatched shapes") {
  const auto s = make_linear_schedule(10, 0.1, 0.2);
  CHECK_THROWS_AS(q_sample(s, ImageBatch(2, 4), 3, ImageBatch(1, 4)), DimensionError);
}

TEST_CASE("q_sample is linear in x0 and eps") {
  const auto s = make_linear_schedule(100, 1e-4, 0.02);
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto a = random_batch(3, 8, 10 + trial);
    const auto b = random_batch(3, 8, 100 + trial);
    const auto e1 = random_batch(3, 8, 200 + trial);
    const auto e2 = random_batch(3, 8, 300 + trial);
    const double alpha = 0.7, beta = -1.3;
    const int t = 1 + static_cast<int>(trial * 5);
    ImageBatch mix_x(3, 8), mix_e(3, 8);
    for (std::size_t i = 0; i < mix_x.size(); ++i) {
      mix_x.values()[i] = alpha * a.values()[i] + beta * b.values()[i];
      mix_e.values()[i] = alpha * e1.values()[i] + beta * e2.values()[i];
    }
    const auto lhs = q_sample(s, mix_x, t, mix_e);
    const auto ya = q_sample(s, a, t, e1);
    const auto yb = q_sample(s, b, t, e2);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      CHECK(lhs.values()[i] == doctest::Approx(alpha * ya.values()[i] + beta * yb.values()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("q_sample followed by predict_x0 is the identity") {
  const auto s = make_linear_schedule(100, 1e-4, 0.02);
  for (int t : {1, 7, 50, 100}) {
    const auto x0 = random_batch(4, 8, static_cast<std::uint64_t>(t));
    const auto eps = random_batch(4, 8, static_cast<std::uint64_t>(t) + 1000);
    const auto back = predict_x0(s, q_sample(s, x0, t, eps), t, eps);
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(std::abs(back.values()[i] - x0.values()[i]) <= 1e-9);
    }
  }
}
