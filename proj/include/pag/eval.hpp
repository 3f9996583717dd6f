#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pag/common.hpp"

namespace pag {

// All metrics work on flattened raw pixels with the Euclidean norm. Sums are
// taken over sorted terms, which makes every metric exactly invariant to
// sample order and makes energy_distance exactly symmetric.

/// V-statistic 2 E|X - Y| - E|X - X'| - E|Y - Y'| (self-pairs included).
double energy_distance(const ImageBatch& samples, const ImageBatch& reference);

/// Mean Euclidean distance over unordered pairs (0 for fewer than two items).
double pairwise_diversity(const ImageBatch& samples);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// k-NN manifold estimator: a point lies inside a set's manifold when it falls
/// within the k-th-neighbour ball of at least one member of that set.
PrecisionRecall knn_precision_recall(const ImageBatch& samples, const ImageBatch& reference,
                                     int k = 3);

/// Radius of each point's k-th nearest neighbour within the same set (self excluded).
std::vector<double> knn_radii(const ImageBatch& set, int k);

struct MetricReport {
  double energy_distance = 0.0;
  double pairwise_diversity = 0.0;
  double knn_precision = 0.0;
  double knn_recall = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_reference = 0;
  std::uint64_t seed = 0;
  int k = 3;
};

MetricReport evaluate(const ImageBatch& samples, const ImageBatch& reference, int k,
                      std::uint64_t seed);

/// `key: value` lines.
std::string format_report(const MetricReport& report);

/// Euclidean distance between two flattened images.
double image_distance(std::span<const double> a, std::span<const double> b);

/// Sum of values after sorting ascending.
double sorted_sum(std::vector<double> values);

}  // namespace pag
