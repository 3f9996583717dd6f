#include "pag/image_ops.hpp"

#include <algorithm>
#include <cmath>

#include "pag/common.hpp"

namespace pag {

std::vector<double> gaussian_kernel(int kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ConfigError("kernel_size must be odd and >= 1, got " + std::to_string(kernel_size));
  }
  if (!(sigma >= 0.0)) throw ConfigError("blur sigma must be >= 0");
  const int radius = kernel_size / 2;
  std::vector<double> taps(static_cast<std::size_t>(kernel_size), 0.0);
  if (sigma == 0.0) {
    taps[static_cast<std::size_t>(radius)] = 1.0;
    return taps;
  }
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    taps[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : taps) v /= total;
  return taps;
}

int kernel_size_for(double sigma) {
  return 2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1;
}

void blur_image(std::span<const double> in, std::span<double> out, std::size_t side,
                std::span<const double> kernel, Padding padding) {
  const int n = static_cast<int>(side);
  const int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> rows(in.size(), 0.0);
  auto sample = [&](std::span<const double> src, int r, int c) -> double {
    if (r < 0 || r >= n || c < 0 || c >= n) {
      if (padding == Padding::zero) return 0.0;
      r = std::clamp(r, 0, n - 1);
      c = std::clamp(c, 0, n - 1);
    }
    return src[static_cast<std::size_t>(r * n + c)];
  };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * sample(in, r, c + k);
      }
      rows[static_cast<std::size_t>(r * n + c)] = acc;
    }
  }
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * sample(rows, r + k, c);
      }
      out[static_cast<std::size_t>(r * n + c)] = acc;
    }
  }
}

}  // namespace pag
