#include "pag/schedule.hpp"

#include <cmath>
#include <string>

namespace pag {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule.T: must be >= 1");
  const std::size_t steps = betas.size();
  betas_.assign(steps + 1, 0.0);
  alphas_.assign(steps + 1, 1.0);
  alpha_bars_.assign(steps + 1, 1.0);
  sigmas_.assign(steps + 1, 0.0);
  double running = 1.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    const double beta = betas[t - 1];
    if (!(beta > 0.0 && beta < 1.0)) {
      throw ConfigError("schedule.betas: beta_" + std::to_string(t) + " outside (0, 1)");
    }
    betas_[t] = beta;
    alphas_[t] = 1.0 - beta;
    running *= alphas_[t];
    alpha_bars_[t] = running;
    sigmas_[t] = std::sqrt(beta);
  }
}

double NoiseSchedule::alpha_bar_or_one(int t) const {
  return t == 0 ? 1.0 : alpha_bar(t);
}

std::size_t NoiseSchedule::checked(int t) const {
  if (t < 1 || t > steps()) {
    throw InputError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) +
                     "]");
  }
  return static_cast<std::size_t>(t);
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule.T: must be >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0)) throw ConfigError("schedule.beta_start: must be > 0");
  if (!(beta_end < 1.0)) throw ConfigError("schedule.beta_end: must be < 1");
  if (!(beta_start <= beta_end)) {
    throw ConfigError("schedule.beta_end: must be >= schedule.beta_start");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < steps; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    betas.back() = beta_end;
  }
  return NoiseSchedule(std::move(betas));
}

ImageBatch q_sample_with(double alpha_bar, const ImageBatch& x0, const ImageBatch& eps) {
  require_same_shape(x0, eps, "q_sample");
  const double signal = std::sqrt(alpha_bar);
  const double noise = std::sqrt(1.0 - alpha_bar);
  ImageBatch out(x0.count(), x0.side());
  auto& o = out.values();
  const auto& a = x0.values();
  const auto& e = eps.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = signal * a[i] + noise * e[i];
  return out;
}

ImageBatch q_sample(const NoiseSchedule& schedule, const ImageBatch& x0, int t,
                    const ImageBatch& eps) {
  return q_sample_with(schedule.alpha_bar(t), x0, eps);
}

}  // namespace pag
