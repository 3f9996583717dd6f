#pragma once

#include <cstdint>
#include <string_view>

#include "pag/common.hpp"
#include "pag/denoiser.hpp"
#include "pag/guidance.hpp"
#include "pag/sampler.hpp"
#include "pag/schedule.hpp"

namespace pag {

enum class MeasurementKind { identity, box_mask, gaussian_blur, downsample };

std::string_view to_string(MeasurementKind kind);
MeasurementKind parse_measurement_kind(std::string_view name);

/// Rows [row, row + height) x cols [col, col + width); clipped to the image.
struct Rect {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;
  bool contains(int r, int c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
};

Rect parse_rect(std::string_view text);

/// Linear measurement operator A acting image by image.
struct MeasurementOp {
  MeasurementKind kind = MeasurementKind::identity;
  Rect rect;             // box_mask: region that is zeroed (unobserved)
  int kernel_size = 5;   // gaussian_blur
  double sigma = 1.0;    // gaussian_blur
  int factor = 2;        // downsample (average pooling)

  static MeasurementOp box(Rect r);

  std::size_t output_side(std::size_t side) const;
  ImageBatch apply(const ImageBatch& x) const;
  ImageBatch adjoint(const ImageBatch& y, std::size_t input_side) const;
  void validate(std::size_t side) const;
};

struct RestoreConfig {
  double eta = 1.0;  // DPS step size
  GuidanceConfig guidance;
  SamplerConfig sampler;
  double noise_std = 0.0;
};

/// A(x0) + noise_std * z; image i draws z from RngStream(seed, i).
ImageBatch measure(const ImageBatch& x0, const MeasurementOp& op, double noise_std,
                   std::uint64_t seed);

/// Gradient w.r.t. x_t of |y - A(x0_hat(x_t))|^2 with eps held constant:
/// (2 / sqrt(alpha_bar_t)) A^T (A(x0_hat) - y).
ImageBatch dps_gradient(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                        const ImageBatch& eps, const ImageBatch& y, const MeasurementOp& op);

/// Squared residual |y - A(x0_hat)|^2 summed per batch (the DPS data term).
double dps_loss(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                const ImageBatch& eps, const ImageBatch& y, const MeasurementOp& op);

/// Unconditional guided sampling with a data-consistency step after each
/// update: x_prev -= eta * sqrt(alpha_bar_t * alpha_bar_prev) / 2 * dps_gradient,
/// i.e. eta is the step size on x0_hat. eta = 0 reproduces sample_loop exactly.
ImageBatch restore(const ImageBatch& y, const MeasurementOp& op, const Denoiser& model,
                   const NoiseSchedule& schedule, const RestoreConfig& config, std::uint64_t seed,
                   std::size_t threads = 0);

}  // namespace pag
