#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pag/common.hpp"
#include "pag/denoiser.hpp"
#include "pag/schedule.hpp"

namespace pag {

// ---- synthetic shapes ----

enum class Glyph : int { square = 0, cross = 1, diamond = 2 };
inline constexpr int kGlyphCount = 3;

/// Side of the glyph bounding box used for a given image side (always odd).
int glyph_extent(int image_side);

/// Binary template (1 = foreground) of the glyph, glyph_extent x glyph_extent.
std::vector<std::uint8_t> glyph_template(Glyph glyph, int image_side);

/// Number of foreground pixels of a glyph.
int glyph_pixel_count(Glyph glyph, int image_side);

struct ShapesDataset {
  ImageBatch images;
  std::vector<int> labels;
};

/// Glyph centred on the grid, jittered by up to one pixel each way, foreground
/// intensity uniform in [0.6, 1.0] on a zero background, then mapped by 2v - 1.
ShapesDataset gen_shapes(std::size_t n, int image_side, std::uint64_t seed);

/// Renders a glyph at offset (dr, dc) from centre with foreground value v (in [0,1] units).
ImageBatch render_glyph(Glyph glyph, int image_side, int dr, int dc, double intensity);

/// Class of the nearest clean template (all jitters, mid intensity) per image.
std::vector<int> classify_by_template(const ImageBatch& images);

// ---- persistence ----

inline constexpr std::uint32_t kFormatVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor);
/// Decodes one tensor starting at `offset`; advances offset past it.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, std::size_t& offset);

void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

/// Ordered named tensors; the container behind checkpoints and traces.
using TensorMap = std::vector<std::pair<std::string, Tensor>>;

std::vector<std::uint8_t> encode_container(const TensorMap& entries);
TensorMap decode_container(const std::vector<std::uint8_t>& bytes);
void save_container(const TensorMap& entries, const std::filesystem::path& path);
TensorMap load_container(const std::filesystem::path& path);

const Tensor& find_entry(const TensorMap& entries, const std::string& name);

struct Checkpoint {
  DenoiserWeights weights;
  NoiseSchedule schedule;
};

TensorMap checkpoint_entries(const DenoiserWeights& weights, const NoiseSchedule& schedule);
Checkpoint checkpoint_from_entries(const TensorMap& entries);
void save_checkpoint(const DenoiserWeights& weights, const NoiseSchedule& schedule,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- images ----

/// [-1, 1] -> [0, 255] with clamping and round-half-away-from-zero.
std::uint8_t to_gray_byte(double v);

/// Tiles the batch row-major into a grid with `columns` columns (0 picks
/// ceil(sqrt(n))) and writes one binary P5 PGM. Empty cells are black.
void export_pgm(const ImageBatch& batch, const std::filesystem::path& path, std::size_t columns = 0);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};
GrayImage read_pgm(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace pag
