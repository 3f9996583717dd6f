#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "pag/data.hpp"

using namespace pag;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const char* root = std::getenv("PAG_TEST_TMP");
  fs::path dir = fs::path(root ? root : fs::temp_directory_path().string()) / "pag_test_data";
  fs::create_directories(dir);
  return dir / name;
}

Tensor sample_tensor() {
  Tensor t{{2, 3, 4}, {}};
  for (int i = 0; i < 24; ++i) t.values.push_back(std::ldexp(static_cast<double>(i) - 11.5, -i % 7) / 3.0);
  t.values[5] = -0.0;
  t.values[6] = 1e-310;
  return t;
}

}  // namespace

TEST_CASE("shape generation is deterministic and seed dependent") {
  const auto a = gen_shapes(40, 8, 3), b = gen_shapes(40, 8, 3), c = gen_shapes(40, 8, 4);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(!(a.images == c.images));
  CHECK(gen_shapes(10, 8, 3).images == a.images.slice(0, 10));
}

TEST_CASE("glyph templates at side 8") {
  CHECK(glyph_extent(8) == 5);
  CHECK(glyph_pixel_count(Glyph::square, 8) == 16);
  CHECK(glyph_pixel_count(Glyph::cross, 8) == 9);
  CHECK(glyph_pixel_count(Glyph::diamond, 8) == 8);
}

TEST_CASE("shape images hold one glyph on a background") {
  const auto d = gen_shapes(300, 8, 5);
  for (std::size_t i = 0; i < d.images.count(); ++i) {
    int fg = 0;
    for (double v : d.images.image(i)) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
      if (v != -1.0) {
        ++fg;
        CHECK(v >= 2.0 * 0.6 - 1.0);
      }
    }
    CHECK(fg == glyph_pixel_count(static_cast<Glyph>(d.labels[i]), 8));
  }
}

TEST_CASE("class frequencies are balanced within three standard deviations") {
  const std::size_t n = 3000;
  const auto d = gen_shapes(n, 8, 6);
  int counts[kGlyphCount] = {0, 0, 0};
  for (int l : d.labels) {
    REQUIRE(l >= 0);
    REQUIRE(l < kGlyphCount);
    ++counts[l];
  }
  const double mean = n / 3.0, sd = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (int c : counts) CHECK(std::abs(c - mean) <= 3.0 * sd);
}

TEST_CASE("template classifier recovers clean and generated glyphs") {
  for (int g = 0; g < kGlyphCount; ++g) {
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const auto img = render_glyph(static_cast<Glyph>(g), 8, dr, dc, 0.8);
        CHECK(classify_by_template(img) == std::vector<int>{g});
      }
    }
  }
  const auto d = gen_shapes(200, 8, 7);
  CHECK(classify_by_template(d.images) == d.labels);
}

TEST_CASE("tensor encoding round trips bitwise") {
  const Tensor scalar{{}, {3.25}};
  for (const auto& t : {scalar, sample_tensor(), Tensor{{0}, {}}}) {
    const auto bytes = encode_tensor(t);
    std::size_t offset = 0;
    const auto back = decode_tensor(bytes, offset);
    CHECK(offset == bytes.size());
    CHECK(back.dims == t.dims);
    REQUIRE(back.values.size() == t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      CHECK(std::signbit(back.values[i]) == std::signbit(t.values[i]));
      CHECK(back.values[i] == t.values[i]);
    }
  }
  const auto path = scratch("t.pagt");
  save_tensor(sample_tensor(), path);
  CHECK(load_tensor(path) == sample_tensor());
}

TEST_CASE("tensor byte layout") {
  const auto bytes = encode_tensor(Tensor{{1}, {1.0}});
  REQUIRE(bytes.size() == 4 + 4 + 4 + 8 + 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PAGT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 1);
  // 1.0 is 0x3FF0000000000000 little endian.
  CHECK(bytes[26] == 0xF0);
  CHECK(bytes[27] == 0x3F);
}

TEST_CASE("malformed tensors are rejected") {
  const auto good = encode_tensor(sample_tensor());
  std::size_t offset = 0;

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_tensor(bad_version, offset), FormatError);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  offset = 0;
  CHECK_THROWS_AS(decode_tensor(bad_magic, offset), FormatError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() - 1}) {
    std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    offset = 0;
    CHECK_THROWS_AS(decode_tensor(truncated, offset), CorruptionError);
  }

  auto trailing = good;
  trailing.push_back(0);
  const auto path = scratch("trailing.pagt");
  write_file(path, trailing);
  CHECK_THROWS_AS(load_tensor(path), CorruptionError);

  auto flipped = good;
  flipped[good.size() - 3] ^= 0x10;
  offset = 0;
  CHECK(!(decode_tensor(flipped, offset) == sample_tensor()));

  auto huge = good;
  huge[12] = 0xFF;
  huge[19] = 0x7F;
  offset = 0;
  CHECK_THROWS_AS(decode_tensor(huge, offset), CorruptionError);
}

TEST_CASE("containers keep order and reject duplicates") {
  const TensorMap entries{{"b", Tensor{{}, {1.0}}}, {"a", sample_tensor()}, {"", Tensor{{0}, {}}}};
  const auto back = decode_container(encode_container(entries));
  CHECK(back == entries);
  CHECK(find_entry(back, "a") == sample_tensor());
  CHECK_THROWS_AS(find_entry(back, "c"), FormatError);

  const TensorMap dup{{"x", Tensor{{}, {1.0}}}, {"x", Tensor{{}, {2.0}}}};
  CHECK_THROWS_AS(encode_container(dup), FormatError);

  auto bytes = encode_container(entries);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_container(bytes), CorruptionError);
  bytes = encode_container(entries);
  bytes.push_back(7);
  CHECK_THROWS_AS(decode_container(bytes), CorruptionError);
  bytes = encode_container(entries);
  bytes[3] = 'T';
  CHECK_THROWS_AS(decode_container(bytes), FormatError);
}

TEST_CASE("checkpoints round trip bitwise") {
  DenoiserConfig cfg;
  cfg.image_side = 6;
  cfg.token_dim = 8;
  cfg.num_blocks = 1;
  const auto w = init_weights(cfg, 9, true);
  const auto s = make_linear_schedule(50, 1e-4, 0.02);
  const auto path = scratch("model.pagc");
  save_checkpoint(w, s, path);
  const auto ck = load_checkpoint(path);
  CHECK(ck.weights == w);
  CHECK(ck.weights.config == cfg);
  REQUIRE(ck.schedule.steps() == 50);
  for (int t = 1; t <= 50; ++t) CHECK(ck.schedule.beta(t) == s.beta(t));
  CHECK(read_file(path) == encode_container(checkpoint_entries(ck.weights, ck.schedule)));

  auto entries = checkpoint_entries(w, s);
  entries[1].second.values[0] = 16;
  CHECK_THROWS_AS(checkpoint_from_entries(entries), FormatError);
}

TEST_CASE("gray byte mapping") {
  CHECK(to_gray_byte(-1.0) == 0);
  CHECK(to_gray_byte(1.0) == 255);
  CHECK(to_gray_byte(0.0) == 128);
  CHECK(to_gray_byte(-3.0) == 0);
  CHECK(to_gray_byte(4.0) == 255);
  CHECK(to_gray_byte(2.0 * 100.0 / 255.0 - 1.0) == 100);
}

TEST_CASE("pgm tiling") {
  ImageBatch b(3, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t p = 0; p < 4; ++p) b.image(i)[p] = (i == 1) ? 1.0 : -1.0;
  }
  b.at(2, 1, 1) = 0.0;
  const auto path = scratch("tiles.pgm");
  export_pgm(b, path);
  const auto bytes = read_file(path);
  const std::string header = "P5\n4 4\n255\n";
  CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);
  const auto img = read_pgm(path);
  REQUIRE(img.width == 4);
  REQUIRE(img.height == 4);
  const std::vector<std::uint8_t> expected{0, 0, 255, 255, 0, 0, 255, 255, 0, 0, 0, 0, 0, 128, 0, 0};
  CHECK(img.pixels == expected);

  export_pgm(b, path, 3);
  const auto row = read_pgm(path);
  CHECK(row.width == 6);
  CHECK(row.height == 2);
}
