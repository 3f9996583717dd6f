#pragma once

#include <span>
#include <vector>

namespace pag {

enum class Padding { zero, clamp };

/// Normalized 1-D Gaussian taps; kernel_size must be odd.
std::vector<double> gaussian_kernel(int kernel_size, double sigma);

/// Kernel size covering +-3 sigma, at least 1.
int kernel_size_for(double sigma);

/// Separable 2-D filtering of one side x side image with a symmetric kernel.
void blur_image(std::span<const double> in, std::span<double> out, std::size_t side,
                std::span<const double> kernel, Padding padding);

}  // namespace pag
