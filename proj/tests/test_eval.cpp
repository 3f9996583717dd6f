#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pag/eval.hpp"

using namespace pag;

namespace {

ImageBatch random_batch(std::size_t n, std::size_t side, std::uint64_t seed, double shift = 0.0) {
  ImageBatch b(n, side);
  RngStream rng(seed, 3);
  for (auto& v : b.values()) v = rng.gaussian() + shift;
  return b;
}

double dist(const ImageBatch& a, std::size_t i, const ImageBatch& b, std::size_t j) {
  double t = 0.0;
  for (std::size_t p = 0; p < a.pixels(); ++p) {
    const double d = a.image(i)[p] - b.image(j)[p];
    t += d * d;
  }
  return std::sqrt(t);
}

ImageBatch permuted(const ImageBatch& b, std::uint64_t seed) {
  std::vector<std::size_t> order(b.count());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  ImageBatch out(b.count(), b.side());
  for (std::size_t i = 0; i < order.size(); ++i) out.assign_slice(i, b.slice(order[i], 1));
  return out;
}

// Points of a 2-D configuration stored as 1 x 1 "images" would lose a
// coordinate, so 2-D points live in the first two pixels of a 2 x 2 image.
ImageBatch points2d(const std::vector<std::pair<double, double>>& pts) {
  ImageBatch b(pts.size(), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    b.image(i)[0] = pts[i].first;
    b.image(i)[1] = pts[i].second;
  }
  return b;
}

}  // namespace

TEST_CASE("energy distance of a set with itself is zero") {
  const auto a = random_batch(30, 4, 1);
  CHECK(energy_distance(a, a) <= 1e-12);
  CHECK(energy_distance(a, permuted(a, 5)) <= 1e-12);
}

TEST_CASE("energy distance of two point masses") {
  const ImageBatch a(3, 2, 0.0);
  const ImageBatch b(2, 2, 1.5);
  CHECK(energy_distance(a, b) == doctest::Approx(2.0 * 3.0).epsilon(1e-15));
}

TEST_CASE("energy distance matches a brute-force double loop") {
  const auto a = random_batch(50, 4, 2);
  const auto b = random_batch(50, 4, 3, 0.3);
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t j = 0; j < 50; ++j) {
      xy += dist(a, i, b, j);
      xx += dist(a, i, a, j);
      yy += dist(b, i, b, j);
    }
  }
  const double oracle = (2.0 * xy - xx - yy) / 2500.0;
  CHECK(std::abs(energy_distance(a, b) - oracle) <= 1e-10);
}

TEST_CASE("energy distance is symmetric, non-negative and order invariant") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_batch(20 + seed, 3, seed, 0.1 * static_cast<double>(seed));
    const auto b = random_batch(17, 3, seed + 50);
    const double d = energy_distance(a, b);
    CHECK(d == energy_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(d == energy_distance(permuted(a, seed), permuted(b, seed + 1)));
  }
  CHECK_THROWS_AS(energy_distance(ImageBatch(0, 3), random_batch(2, 3, 1)), InputError);
}

TEST_CASE("pairwise diversity") {
  CHECK(pairwise_diversity(ImageBatch(5, 3, 0.25)) == 0.0);
  ImageBatch two(2, 2, std::vector<double>{0, 0, 0, 0, 3, 4, 0, 0});
  CHECK(pairwise_diversity(two) == 5.0);
  const auto ten = random_batch(10, 4, 9);
  std::vector<double> d;
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = i + 1; j < 10; ++j) d.push_back(dist(ten, i, ten, j));
  }
  REQUIRE(d.size() == 45);
  std::sort(d.begin(), d.end());
  double total = 0.0;
  for (double v : d) total += v;
  CHECK(pairwise_diversity(ten) == total / 45.0);
  CHECK(pairwise_diversity(permuted(ten, 2)) == pairwise_diversity(ten));
}

TEST_CASE("precision and recall of identical sets are one") {
  const auto a = random_batch(25, 4, 10);
  const auto pr = knn_precision_recall(a, a, 3);
  CHECK(pr.precision == 1.0);
  CHECK(pr.recall == 1.0);
}

TEST_CASE("far-away samples have zero precision") {
  const auto ref = random_batch(25, 4, 11);
  const auto far = random_batch(25, 4, 12, 100.0);
  const auto pr = knn_precision_recall(far, ref, 3);
  CHECK(pr.precision == 0.0);
  CHECK(pr.recall == 0.0);
}

TEST_CASE("precision and recall match a brute-force oracle on a 2-D configuration") {
  RngStream rng(13);
  std::vector<std::pair<double, double>> sample_pts, ref_pts;
  for (int i = 0; i < 20; ++i) ref_pts.emplace_back(rng.gaussian(), rng.gaussian());
  for (int i = 0; i < 20; ++i) sample_pts.emplace_back(1.0 + rng.gaussian(), 0.5 * rng.gaussian());
  const auto samples = points2d(sample_pts), ref = points2d(ref_pts);
  const int k = 3;
  auto radii = [&](const std::vector<std::pair<double, double>>& pts) {
    std::vector<double> r;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::vector<double> d;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (i != j) d.push_back(std::hypot(pts[i].first - pts[j].first, pts[i].second - pts[j].second));
      }
      std::sort(d.begin(), d.end());
      r.push_back(d[k - 1]);
    }
    return r;
  };
  auto coverage = [&](const std::vector<std::pair<double, double>>& pts,
                      const std::vector<std::pair<double, double>>& support) {
    const auto r = radii(support);
    int inside = 0;
    for (const auto& p : pts) {
      bool hit = false;
      for (std::size_t j = 0; j < support.size(); ++j) {
        hit = hit || std::hypot(p.first - support[j].first, p.second - support[j].second) <= r[j];
      }
      inside += hit ? 1 : 0;
    }
    return inside / static_cast<double>(pts.size());
  };
  const auto pr = knn_precision_recall(samples, ref, k);
  CHECK(pr.precision == coverage(sample_pts, ref_pts));
  CHECK(pr.recall == coverage(ref_pts, sample_pts));
  CHECK(pr.precision > 0.0);
  CHECK(pr.precision < 1.0);
  const auto engine_radii = knn_radii(ref, k), oracle_radii = radii(ref_pts);
  REQUIRE(engine_radii.size() == oracle_radii.size());
  for (std::size_t i = 0; i < oracle_radii.size(); ++i) {
    CHECK(std::abs(engine_radii[i] - oracle_radii[i]) <= 1e-15 * oracle_radii[i]);
  }

  const auto again = knn_precision_recall(permuted(samples, 1), permuted(ref, 2), k);
  CHECK(again.precision == pr.precision);
  CHECK(again.recall == pr.recall);
}

TEST_CASE("knn needs more points than k") {
  CHECK_THROWS_AS(knn_radii(random_batch(3, 2, 1), 3), InputError);
  CHECK_THROWS_AS(knn_radii(random_batch(5, 2, 1), 0), ConfigError);
}

TEST_CASE("report formatting") {
  const auto a = random_batch(10, 3, 20), b = random_batch(12, 3, 21);
  const auto r = evaluate(a, b, 3, 7);
  CHECK(r.n_samples == 10);
  CHECK(r.n_reference == 12);
  CHECK(r.knn_precision >= 0.0);
  CHECK(r.knn_precision <= 1.0);
  const auto text = format_report(r);
  CHECK(text.find("energy_distance: ") == 0);
  CHECK(text.find("\nseed: 7\n") != std::string::npos);
  CHECK(text == format_report(evaluate(a, b, 3, 7)));
}
