#include "pag/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace pag {

// ---- shapes ----

int glyph_extent(int image_side) {
  int g = image_side - 3;
  if (g % 2 == 0) --g;
  return std::max(g, 1);
}

std::vector<std::uint8_t> glyph_template(Glyph glyph, int image_side) {
  const int g = glyph_extent(image_side);
  const int mid = g / 2;
  std::vector<std::uint8_t> t(static_cast<std::size_t>(g * g), 0);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      bool on = false;
      switch (glyph) {
        case Glyph::square: on = r == 0 || r == g - 1 || c == 0 || c == g - 1; break;
        case Glyph::cross: on = r == mid || c == mid; break;
        case Glyph::diamond: on = std::abs(r - mid) + std::abs(c - mid) == mid; break;
      }
      t[static_cast<std::size_t>(r * g + c)] = on ? 1 : 0;
    }
  }
  return t;
}

int glyph_pixel_count(Glyph glyph, int image_side) {
  const auto t = glyph_template(glyph, image_side);
  return static_cast<int>(std::count(t.begin(), t.end(), std::uint8_t{1}));
}

namespace {

int base_offset(int image_side) { return (image_side - glyph_extent(image_side)) / 2; }

int clamp_jitter(int image_side, int shift) {
  const int off = base_offset(image_side);
  const int g = glyph_extent(image_side);
  return std::clamp(shift, -off, image_side - g - off);
}

void draw_glyph(std::span<double> img, Glyph glyph, int image_side, int dr, int dc, double v) {
  const int g = glyph_extent(image_side);
  const int r0 = base_offset(image_side) + clamp_jitter(image_side, dr);
  const int c0 = base_offset(image_side) + clamp_jitter(image_side, dc);
  const auto t = glyph_template(glyph, image_side);
  std::fill(img.begin(), img.end(), -1.0);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      if (t[static_cast<std::size_t>(r * g + c)] != 0) {
        img[static_cast<std::size_t>((r0 + r) * image_side + c0 + c)] = 2.0 * v - 1.0;
      }
    }
  }
}

}  // namespace

ImageBatch render_glyph(Glyph glyph, int image_side, int dr, int dc, double intensity) {
  ImageBatch out(1, static_cast<std::size_t>(image_side));
  draw_glyph(out.image(0), glyph, image_side, dr, dc, intensity);
  return out;
}

ShapesDataset gen_shapes(std::size_t n, int image_side, std::uint64_t seed) {
  if (image_side < 2) throw ConfigError("model.image_side: must be >= 2");
  ShapesDataset ds{ImageBatch(n, static_cast<std::size_t>(image_side)), std::vector<int>(n)};
  RngStream rng(seed, 0x5348);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.below(kGlyphCount));
    const int dr = static_cast<int>(rng.below(3)) - 1;
    const int dc = static_cast<int>(rng.below(3)) - 1;
    const double intensity = 0.6 + 0.4 * rng.uniform();
    draw_glyph(ds.images.image(i), static_cast<Glyph>(cls), image_side, dr, dc, intensity);
    ds.labels[i] = cls;
  }
  return ds;
}

std::vector<int> classify_by_template(const ImageBatch& images) {
  const int side = static_cast<int>(images.side());
  std::vector<std::pair<int, ImageBatch>> templates;
  for (int cls = 0; cls < kGlyphCount; ++cls) {
    std::set<std::pair<int, int>> seen;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if (!seen.emplace(clamp_jitter(side, dr), clamp_jitter(side, dc)).second) continue;
        templates.emplace_back(cls, render_glyph(static_cast<Glyph>(cls), side, dr, dc, 0.8));
      }
    }
  }
  std::vector<int> labels(images.count());
  for (std::size_t i = 0; i < images.count(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [cls, tpl] : templates) {
      double d = 0.0;
      const auto a = images.image(i);
      const auto b = tpl.image(0);
      for (std::size_t p = 0; p < a.size(); ++p) d += (a[p] - b[p]) * (a[p] - b[p]);
      if (d < best) {
        best = d;
        labels[i] = cls;
      }
    }
  }
  return labels;
}

// ---- persistence ----

namespace {

constexpr char kTensorMagic[4] = {'P', 'A', 'G', 'T'};
constexpr char kContainerMagic[4] = {'P', 'A', 'G', 'C'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    std::memcpy(&bits, &value, sizeof(double));
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  if (in.size() < offset + sizeof(T)) throw CorruptionError("truncated file");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  }
  offset += sizeof(T);
  if constexpr (std::is_same_v<T, double>) {
    double v;
    std::memcpy(&v, &bits, sizeof(double));
    return v;
  } else {
    return static_cast<T>(bits);
  }
}

void check_magic(const std::vector<std::uint8_t>& in, std::size_t& offset, const char* magic) {
  if (in.size() < offset + 4) throw CorruptionError("truncated file");
  if (std::memcmp(in.data() + offset, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + std::string(magic, 4));
  }
  offset += 4;
  const auto version = get_le<std::uint32_t>(in, offset);
  if (version != kFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(version));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor) {
  if (tensor.values.size() != tensor.element_count()) {
    throw DimensionError("tensor payload does not match its dims");
  }
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_le<std::uint64_t>(out, d);
  for (double v : tensor.values) put_le<double>(out, v);
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  check_magic(bytes, offset, kTensorMagic);
  Tensor t;
  const auto ndim = get_le<std::uint32_t>(bytes, offset);
  if (static_cast<std::uint64_t>(ndim) * 8 > bytes.size() - offset) throw CorruptionError("truncated file");
  t.dims.resize(ndim);
  for (auto& d : t.dims) d = get_le<std::uint64_t>(bytes, offset);
  const std::uint64_t n = t.element_count();
  if (n > (bytes.size() - offset) / 8) throw CorruptionError("truncated tensor payload");
  t.values.resize(n);
  for (auto& v : t.values) v = get_le<double>(bytes, offset);
  return t;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for " + path.string());
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  write_file(path, encode_tensor(tensor));
}

Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) throw CorruptionError("trailing bytes after tensor in " + path.string());
  return t;
}

std::vector<std::uint8_t> encode_container(const TensorMap& entries) {
  std::set<std::string> names;
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (!names.insert(name).second) throw FormatError("duplicate entry name '" + name + "'");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto body = encode_tensor(tensor);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

TensorMap decode_container(const std::vector<std::uint8_t>& bytes) {
  std::size_t offset = 0;
  check_magic(bytes, offset, kContainerMagic);
  const auto count = get_le<std::uint32_t>(bytes, offset);
  TensorMap entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(bytes, offset);
    if (bytes.size() - offset < len) throw CorruptionError("truncated entry name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + offset), len);
    offset += len;
    if (!names.insert(name).second) throw FormatError("duplicate entry name '" + name + "'");
    entries.emplace_back(std::move(name), decode_tensor(bytes, offset));
  }
  if (offset != bytes.size()) throw CorruptionError("trailing bytes after container");
  return entries;
}

void save_container(const TensorMap& entries, const std::filesystem::path& path) {
  write_file(path, encode_container(entries));
}

TensorMap load_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

const Tensor& find_entry(const TensorMap& entries, const std::string& name) {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw FormatError("missing entry '" + name + "'");
}

namespace {

Tensor scalar(double v) { return Tensor{{}, {v}}; }

double scalar_of(const TensorMap& entries, const std::string& name) {
  const auto& t = find_entry(entries, name);
  if (!t.dims.empty()) throw FormatError("entry '" + name + "' is not a scalar");
  return t.values[0];
}

}  // namespace

TensorMap checkpoint_entries(const DenoiserWeights& weights, const NoiseSchedule& schedule) {
  const auto& cfg = weights.config;
  TensorMap entries;
  entries.emplace_back("config.image_side", scalar(cfg.image_side));
  entries.emplace_back("config.token_dim", scalar(cfg.token_dim));
  entries.emplace_back("config.num_blocks", scalar(cfg.num_blocks));
  entries.emplace_back("config.num_classes", scalar(cfg.num_classes));
  entries.emplace_back("config.cond_dropout", scalar(cfg.cond_dropout));
  entries.emplace_back("schedule.T", scalar(schedule.steps()));
  entries.emplace_back("schedule.beta_start", scalar(schedule.beta_start()));
  entries.emplace_back("schedule.beta_end", scalar(schedule.beta_end()));
  Tensor betas{{static_cast<std::uint64_t>(schedule.steps())}, {}};
  for (int t = 1; t <= schedule.steps(); ++t) betas.values.push_back(schedule.beta(t));
  entries.emplace_back("schedule.betas", std::move(betas));
  weights.for_each([&](const std::string& name, Eigen::Index r, Eigen::Index c, const double* p) {
    entries.emplace_back("weights." + name,
                         Tensor{{static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c)},
                                std::vector<double>(p, p + r * c)});
  });
  return entries;
}

Checkpoint checkpoint_from_entries(const TensorMap& entries) {
  DenoiserConfig cfg;
  cfg.image_side = static_cast<int>(scalar_of(entries, "config.image_side"));
  cfg.token_dim = static_cast<int>(scalar_of(entries, "config.token_dim"));
  cfg.num_blocks = static_cast<int>(scalar_of(entries, "config.num_blocks"));
  cfg.num_classes = static_cast<int>(scalar_of(entries, "config.num_classes"));
  cfg.cond_dropout = scalar_of(entries, "config.cond_dropout");
  cfg.validate();
  DenoiserWeights w = zeros_like(init_weights(cfg, 0));
  w.for_each([&](const std::string& name, Eigen::Index r, Eigen::Index c, double* p) {
    const auto& t = find_entry(entries, "weights." + name);
    if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint64_t>(r) ||
        t.dims[1] != static_cast<std::uint64_t>(c)) {
      throw FormatError("weights." + name + ": shape does not match the stored config");
    }
    std::copy(t.values.begin(), t.values.end(), p);
  });
  const auto& betas = find_entry(entries, "schedule.betas");
  return {std::move(w), NoiseSchedule(betas.values)};
}

void save_checkpoint(const DenoiserWeights& weights, const NoiseSchedule& schedule,
                     const std::filesystem::path& path) {
  save_container(checkpoint_entries(weights, schedule), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_entries(load_container(path));
}

// ---- images ----

std::uint8_t to_gray_byte(double v) {
  if (std::isnan(v)) return 0;
  const double clamped = std::clamp(v, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::round((clamped + 1.0) * 0.5 * 255.0));
}

void export_pgm(const ImageBatch& batch, const std::filesystem::path& path, std::size_t columns) {
  const std::size_t n = batch.count();
  if (columns == 0) {
    columns = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(std::max<std::size_t>(n, 1)))));
  }
  const std::size_t rows = std::max<std::size_t>((n + columns - 1) / columns, 1);
  const std::size_t side = batch.side();
  const std::size_t width = columns * side;
  const std::size_t height = rows * side;
  std::vector<std::uint8_t> pixels(width * height, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gr = i / columns;
    const std::size_t gc = i % columns;
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        pixels[(gr * side + r) * width + gc * side + c] = to_gray_byte(batch.at(i, r, c));
      }
    }
  }
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file(path, bytes);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::string text(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(bytes.size(), 64)));
  std::istringstream in(text);
  std::string magic;
  GrayImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255) throw FormatError("not an 8-bit P5 PGM: " + path.string());
  const auto header = static_cast<std::size_t>(in.tellg()) + 1;
  if (bytes.size() != header + img.width * img.height) throw CorruptionError("PGM payload size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return img;
}

}  // namespace pag
