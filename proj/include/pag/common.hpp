#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pag {

// Error hierarchy. The CLI maps ConfigError to exit code 2 and NumericError to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step = -1)
      : Error(step >= 0 ? what + " (step " + std::to_string(step) + ")" : what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Batch of square grayscale images, shape (count, side, side), row-major.
class ImageBatch {
 public:
  ImageBatch() = default;
  ImageBatch(std::size_t count, std::size_t side, double fill = 0.0)
      : count_(count), side_(side), values_(count * side * side, fill) {}
  ImageBatch(std::size_t count, std::size_t side, std::vector<double> values);

  std::size_t count() const { return count_; }
  std::size_t side() const { return side_; }
  std::size_t pixels() const { return side_ * side_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> image(std::size_t i) { return {values_.data() + i * pixels(), pixels()}; }
  std::span<const double> image(std::size_t i) const {
    return {values_.data() + i * pixels(), pixels()};
  }
  double& at(std::size_t i, std::size_t row, std::size_t col) {
    return values_[i * pixels() + row * side_ + col];
  }
  double at(std::size_t i, std::size_t row, std::size_t col) const {
    return values_[i * pixels() + row * side_ + col];
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_shape(const ImageBatch& other) const {
    return count_ == other.count_ && side_ == other.side_;
  }
  bool operator==(const ImageBatch& other) const = default;

  /// Copies images [first, first + n) into a new batch.
  ImageBatch slice(std::size_t first, std::size_t n) const;
  void assign_slice(std::size_t first, const ImageBatch& part);

 private:
  std::size_t count_ = 0;
  std::size_t side_ = 0;
  std::vector<double> values_;
};

void require_same_shape(const ImageBatch& a, const ImageBatch& b, const char* what);
bool all_finite(std::span<const double> values);

/// Generic n-d tensor used by the persistence layer.
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  std::uint64_t element_count() const;
  bool operator==(const Tensor&) const = default;
};

Tensor to_tensor(const ImageBatch& batch);
ImageBatch to_image_batch(const Tensor& tensor);

/// Independent random stream for one (seed, stream id) pair. Streams never share
/// state, so per-chain streams give identical draws no matter how chains are
/// scheduled across workers.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream = 0);

  double gaussian() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

  void fill_gaussian(std::span<double> out) {
    for (auto& v : out) v = gaussian();
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// FNV-1a over the raw bytes of the values; used for golden regression hashes.
std::uint64_t hash_values(std::span<const double> values);

/// Worker count from PAG_THREADS (unset or 0 means serial).
std::size_t threads_from_env();

/// Runs fn(i) for i in [0, count). Work is split into contiguous chunks; callers
/// write into per-index slots so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn);

}  // namespace pag

#include "pag/parallel.ipp"
