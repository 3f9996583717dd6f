#include "pag/common.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>

namespace pag {

ImageBatch::ImageBatch(std::size_t count, std::size_t side, std::vector<double> values)
    : count_(count), side_(side), values_(std::move(values)) {
  if (values_.size() != count_ * side_ * side_) {
    throw DimensionError("image batch payload has " + std::to_string(values_.size()) +
                         " values, expected " + std::to_string(count_ * side_ * side_));
  }
}

ImageBatch ImageBatch::slice(std::size_t first, std::size_t n) const {
  ImageBatch out(n, side_);
  std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(first * pixels()), n * pixels(),
              out.values_.begin());
  return out;
}

void ImageBatch::assign_slice(std::size_t first, const ImageBatch& part) {
  std::copy(part.values_.begin(), part.values_.end(),
            values_.begin() + static_cast<std::ptrdiff_t>(first * pixels()));
}

void require_same_shape(const ImageBatch& a, const ImageBatch& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.count()) +
                         "x" + std::to_string(a.side()) + " vs " + std::to_string(b.count()) +
                         "x" + std::to_string(b.side()) + ")");
  }
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Tensor to_tensor(const ImageBatch& batch) {
  return Tensor{{batch.count(), batch.side(), batch.side()}, batch.values()};
}

ImageBatch to_image_batch(const Tensor& tensor) {
  if (tensor.dims.size() != 3 || tensor.dims[1] != tensor.dims[2]) {
    throw DimensionError("expected a (N, S, S) tensor for an image batch");
  }
  return ImageBatch(tensor.dims[0], tensor.dims[1], tensor.values);
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ (stream * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream) : engine_(mix_seed(seed, stream)) {}

std::uint64_t hash_values(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

std::size_t threads_from_env() {
  const char* raw = std::getenv("PAG_THREADS");
  if (raw == nullptr || *raw == '\0') return 0;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 0) throw ConfigError("PAG_THREADS must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

}  // namespace pag
