#pragma once

#include <string_view>

#include "pag/common.hpp"
#include "pag/denoiser.hpp"

namespace pag {

enum class GuidanceMode { none, cfg, pag, cfg_plus_pag };

std::string_view to_string(GuidanceMode mode);
GuidanceMode parse_guidance_mode(std::string_view name);

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::none;
  double pag_scale = 1.0;  // s
  double cfg_scale = 0.0;  // w
  PerturbationSpec perturbation = PerturbationSpec::identity({});
  // Active on sampling step i of n when window_start <= i / n < window_end
  // (window_end == 1 keeps the last step active).
  double window_start = 0.0;
  double window_end = 1.0;

  bool needs_perturbed() const { return mode == GuidanceMode::pag || mode == GuidanceMode::cfg_plus_pag; }
  bool needs_null() const { return mode == GuidanceMode::cfg || mode == GuidanceMode::cfg_plus_pag; }
  bool active_at(std::size_t step_index, std::size_t total_steps) const;
  void validate(int num_blocks) const;
};

/// eps + s * (eps - eps_hat).
ImageBatch pag_combine(const ImageBatch& eps, const ImageBatch& eps_hat, double s);

/// eps_c + w * (eps_c - eps_u); the same linear map as pag_combine.
ImageBatch cfg_combine(const ImageBatch& eps_c, const ImageBatch& eps_u, double w);

/// eps_c + w * (eps_c - eps_u) + s * (eps_c - eps_hat_c).
ImageBatch combined(const ImageBatch& eps_c, const ImageBatch& eps_u, const ImageBatch& eps_hat_c,
                    double w, double s);

/// Per-pixel |eps - eps_hat| (single channel, so the channel mean is the value
/// itself), clipped per image at its 99.5th percentile.
ImageBatch delta_map(const ImageBatch& eps, const ImageBatch& eps_hat);

/// Linear-interpolated percentile (q in [0, 1]) of a sample.
double percentile(std::vector<double> values, double q);

}  // namespace pag
