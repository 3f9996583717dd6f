#pragma once

#include <vector>

#include "pag/common.hpp"

namespace pag {

/// Variance schedule with 1-based timestep indexing: t in {1..T}. Index 0 of
/// each table holds the clean-data convention (beta 0, alpha_bar 1) so that
/// tables can be addressed directly by t.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()) - 1; }
  double beta(int t) const { return betas_.at(checked(t)); }
  double alpha(int t) const { return alphas_.at(checked(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(checked(t)); }
  double sigma(int t) const { return sigmas_.at(checked(t)); }

  /// alpha_bar with the t = 0 convention (returns 1 for t == 0).
  double alpha_bar_or_one(int t) const;

  double beta_start() const { return betas_[1]; }
  double beta_end() const { return betas_.back(); }

 private:
  std::size_t checked(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
};

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
ImageBatch q_sample(const NoiseSchedule& schedule, const ImageBatch& x0, int t,
                    const ImageBatch& eps);

/// Same map with an explicit alpha_bar, used for limit cases and by the samplers.
ImageBatch q_sample_with(double alpha_bar, const ImageBatch& x0, const ImageBatch& eps);

}  // namespace pag
