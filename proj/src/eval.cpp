#include "pag/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace pag {

double image_distance(std::span<const double> a, std::span<const double> b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    total += d * d;
  }
  return std::sqrt(total);
}

double sorted_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

namespace {

void require_nonempty(const ImageBatch& b, const char* what) {
  if (b.count() == 0) throw InputError(std::string(what) + ": empty sample set");
}

double mean_cross_distance(const ImageBatch& a, const ImageBatch& b) {
  std::vector<double> d;
  d.reserve(a.count() * b.count());
  for (std::size_t i = 0; i < a.count(); ++i) {
    for (std::size_t j = 0; j < b.count(); ++j) d.push_back(image_distance(a.image(i), b.image(j)));
  }
  const double n = static_cast<double>(d.size());
  return sorted_sum(std::move(d)) / n;
}

}  // namespace

double energy_distance(const ImageBatch& samples, const ImageBatch& reference) {
  require_nonempty(samples, "energy_distance");
  require_nonempty(reference, "energy_distance");
  if (samples.side() != reference.side()) throw DimensionError("energy_distance: image sizes differ");
  const double cross = mean_cross_distance(samples, reference);
  const double self_a = mean_cross_distance(samples, samples);
  const double self_b = mean_cross_distance(reference, reference);
  // The V-statistic is a squared MMD and therefore >= 0; clamp rounding residue.
  return std::max(0.0, 2.0 * cross - (self_a + self_b));
}

double pairwise_diversity(const ImageBatch& samples) {
  if (samples.count() < 2) return 0.0;
  std::vector<double> d;
  for (std::size_t i = 0; i < samples.count(); ++i) {
    for (std::size_t j = i + 1; j < samples.count(); ++j) {
      d.push_back(image_distance(samples.image(i), samples.image(j)));
    }
  }
  const double n = static_cast<double>(d.size());
  return sorted_sum(std::move(d)) / n;
}

std::vector<double> knn_radii(const ImageBatch& set, int k) {
  if (k < 1) throw ConfigError("eval.k: must be >= 1");
  if (set.count() <= static_cast<std::size_t>(k)) {
    throw InputError("knn: need more than k = " + std::to_string(k) + " points per set");
  }
  std::vector<double> radii(set.count());
  std::vector<double> d;
  for (std::size_t i = 0; i < set.count(); ++i) {
    d.clear();
    for (std::size_t j = 0; j < set.count(); ++j) {
      if (j != i) d.push_back(image_distance(set.image(i), set.image(j)));
    }
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    radii[i] = d[static_cast<std::size_t>(k - 1)];
  }
  return radii;
}

namespace {

double manifold_coverage(const ImageBatch& points, const ImageBatch& support,
                         const std::vector<double>& radii) {
  std::size_t inside = 0;
  for (std::size_t i = 0; i < points.count(); ++i) {
    for (std::size_t j = 0; j < support.count(); ++j) {
      if (image_distance(points.image(i), support.image(j)) <= radii[j]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(points.count());
}

}  // namespace

PrecisionRecall knn_precision_recall(const ImageBatch& samples, const ImageBatch& reference,
                                     int k) {
  require_nonempty(samples, "knn_precision_recall");
  require_nonempty(reference, "knn_precision_recall");
  const auto ref_radii = knn_radii(reference, k);
  const auto sample_radii = knn_radii(samples, k);
  return {manifold_coverage(samples, reference, ref_radii),
          manifold_coverage(reference, samples, sample_radii)};
}

MetricReport evaluate(const ImageBatch& samples, const ImageBatch& reference, int k,
                      std::uint64_t seed) {
  MetricReport r;
  r.energy_distance = energy_distance(samples, reference);
  r.pairwise_diversity = pairwise_diversity(samples);
  const auto pr = knn_precision_recall(samples, reference, k);
  r.knn_precision = pr.precision;
  r.knn_recall = pr.recall;
  r.n_samples = samples.count();
  r.n_reference = reference.count();
  r.seed = seed;
  r.k = k;
  return r;
}

std::string format_report(const MetricReport& report) {
  std::ostringstream out;
  char buf[64];
  auto real = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << key << ": " << buf << '\n';
  };
  real("energy_distance", report.energy_distance);
  real("pairwise_diversity", report.pairwise_diversity);
  real("knn_precision", report.knn_precision);
  real("knn_recall", report.knn_recall);
  out << "k: " << report.k << '\n';
  out << "n_samples: " << report.n_samples << '\n';
  out << "n_reference: " << report.n_reference << '\n';
  out << "seed: " << report.seed << '\n';
  return out.str();
}

}  // namespace pag
