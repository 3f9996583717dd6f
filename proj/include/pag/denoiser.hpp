#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pag/common.hpp"
#include "pag/schedule.hpp"

namespace pag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

struct DenoiserConfig {
  int image_side = 8;
  int token_dim = 32;
  int num_blocks = 2;
  int num_classes = 3;
  double cond_dropout = 0.1;

  int null_class() const { return num_classes; }
  int tokens() const { return image_side * image_side; }
  int mlp_dim() const { return 4 * token_dim; }
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

struct AttentionBlockWeights {
  RowVector attn_norm_gain, attn_norm_bias;
  Matrix query, key, value, out;
  RowVector out_bias;
  RowVector mlp_norm_gain, mlp_norm_bias;
  Matrix mlp_in;
  RowVector mlp_in_bias;
  Matrix mlp_out;
  RowVector mlp_out_bias;
};

/// All trainable tensors. Gradients reuse this type with identical shapes.
struct DenoiserWeights {
  DenoiserConfig config;
  RowVector pixel_lift, pixel_bias;
  Matrix time_proj;
  RowVector time_bias;
  Matrix class_embed;  // (num_classes + 1) x d, last row is the null class
  std::vector<AttentionBlockWeights> blocks;
  RowVector head;
  RowVector head_bias;  // length 1

  /// Calls fn(name, rows, cols, data) for every tensor in a fixed order.
  template <typename Fn>
  void for_each(Fn&& fn);
  template <typename Fn>
  void for_each(Fn&& fn) const;

  std::size_t parameter_count() const;
  bool operator==(const DenoiserWeights& other) const;
};

DenoiserWeights zeros_like(const DenoiserWeights& w);

/// Gaussian weights: standard normal pixel lift, std 1/sqrt(rows) for every
/// matrix (rows are the fan-in; the class table counts its rows too), unit
/// norm gains, zero biases. The head is zero unless random_head is set, in
/// which case it draws with std 0.02.
DenoiserWeights init_weights(const DenoiserConfig& config, std::uint64_t seed,
                             bool random_head = false);

enum class PerturbationKind {
  none,
  identity_map,
  random_mask,
  offdiag_mask,
  additive_noise,
  map_blur,
  condition_drop,
  input_blur,
};

std::string_view to_string(PerturbationKind kind);
PerturbationKind parse_perturbation_kind(std::string_view name);

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::none;
  double ratio = 0.25;         // random_mask / offdiag_mask
  std::uint64_t seed = 0;      // random_mask / offdiag_mask / additive_noise
  double sigma = 0.1;          // additive_noise
  int kernel_size = 5;         // map_blur
  double blur_sigma = 1.0;     // map_blur / input_blur
  std::vector<int> layers;     // 1-based attention block indices

  static PerturbationSpec none_spec() { return {}; }
  static PerturbationSpec identity(std::vector<int> layers);
  static PerturbationSpec condition_drop();

  bool attention_level() const;
  bool applies_to(int block) const;
  void validate(int num_blocks) const;
};

struct AttentionResult {
  Matrix output;
  Matrix map;  // row-stochastic
};

/// Softmax(Q K^T / sqrt(d)) V.
AttentionResult self_attention(const Matrix& q, const Matrix& k, const Matrix& v);

/// Attention with the map manipulated per spec. `block` feeds the per-block
/// mask and noise streams so that different blocks see different patterns.
AttentionResult perturbed_self_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const PerturbationSpec& spec, int block = 1);

/// Boolean mask (true = keep) used by the mask perturbations, row-major hw x hw.
std::vector<bool> attention_keep_mask(std::size_t tokens, const PerturbationSpec& spec, int block);

/// Activation taps for introspection in tests. block_inputs[i][b] is the token
/// matrix entering block b (0-based) for image i.
struct ForwardTaps {
  std::vector<std::vector<Matrix>> block_inputs;
  std::vector<std::vector<Matrix>> attention_maps;
  std::vector<Matrix> final_tokens;
};

class Denoiser {
 public:
  explicit Denoiser(DenoiserWeights weights);

  const DenoiserWeights& weights() const { return weights_; }
  const DenoiserConfig& config() const { return weights_.config; }

  /// Predicted noise for every image of x_t. `classes` holds one label per
  /// image or a single label broadcast to all; num_classes denotes null.
  ImageBatch forward(const ImageBatch& x_t, int t, std::span<const int> classes,
                     const PerturbationSpec& spec, ForwardTaps* taps = nullptr) const;
  ImageBatch forward(const ImageBatch& x_t, int t, int cls, const PerturbationSpec& spec) const {
    return forward(x_t, t, std::span<const int>(&cls, 1), spec);
  }

  /// Number of batched forward evaluations since construction or reset.
  std::uint64_t evaluations() const { return evaluations_.load(); }
  void reset_evaluations() { evaluations_.store(0); }

 private:
  DenoiserWeights weights_;
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

/// Random quantities of one training-loss evaluation, drawn once so that the
/// loss can be re-evaluated (finite differences) on identical inputs.
struct LossDraw {
  std::vector<int> timesteps;
  std::vector<int> classes;  // after condition dropout
  ImageBatch noise;
  ImageBatch noisy;
};

LossDraw draw_loss_inputs(const NoiseSchedule& schedule, const ImageBatch& batch,
                          std::span<const int> classes, double cond_dropout, int null_class,
                          RngStream& rng);

/// Mean over batch and pixels of (noise - prediction)^2.
double mse_loss(const LossDraw& draw, const ImageBatch& prediction);

double loss_on(const DenoiserWeights& weights, const LossDraw& draw);

double loss(const DenoiserWeights& weights, const NoiseSchedule& schedule, const ImageBatch& batch,
            std::span<const int> classes, RngStream& rng);

struct LossAndGrad {
  double loss = 0.0;
  DenoiserWeights grad;
};

/// Reverse-mode gradient of scale * loss_on(weights, draw). Per-image gradients
/// are reduced in image order regardless of `threads`.
LossAndGrad loss_and_grad(const DenoiserWeights& weights, const LossDraw& draw,
                          double scale = 1.0, std::size_t threads = 0);

/// Draws inputs from rng and differentiates; throws NumericError naming the
/// first non-finite gradient tensor.
DenoiserWeights grad(const DenoiserWeights& weights, const NoiseSchedule& schedule,
                     const ImageBatch& batch, std::span<const int> classes, RngStream& rng,
                     double scale = 1.0, std::size_t threads = 0);

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainOptions {
  int steps = 2000;
  int batch_size = 32;
  AdamParams adam;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

struct TrainResult {
  DenoiserWeights weights;
  std::vector<double> loss_curve;
};

TrainResult train(const DenoiserConfig& config, const NoiseSchedule& schedule,
                  const ImageBatch& data, std::span<const int> labels,
                  const TrainOptions& options);

// --- implementation of the tensor visitor ---

template <typename Fn>
void DenoiserWeights::for_each(Fn&& fn) {
  auto vec = [&](const std::string& name, RowVector& v) { fn(name, 1, v.size(), v.data()); };
  auto mat = [&](const std::string& name, Matrix& m) { fn(name, m.rows(), m.cols(), m.data()); };
  vec("pixel_lift", pixel_lift);
  vec("pixel_bias", pixel_bias);
  mat("time_proj", time_proj);
  vec("time_bias", time_bias);
  mat("class_embed", class_embed);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = blocks[b];
    const std::string p = "block" + std::to_string(b + 1) + ".";
    vec(p + "attn_norm_gain", blk.attn_norm_gain);
    vec(p + "attn_norm_bias", blk.attn_norm_bias);
    mat(p + "query", blk.query);
    mat(p + "key", blk.key);
    mat(p + "value", blk.value);
    mat(p + "out", blk.out);
    vec(p + "out_bias", blk.out_bias);
    vec(p + "mlp_norm_gain", blk.mlp_norm_gain);
    vec(p + "mlp_norm_bias", blk.mlp_norm_bias);
    mat(p + "mlp_in", blk.mlp_in);
    vec(p + "mlp_in_bias", blk.mlp_in_bias);
    mat(p + "mlp_out", blk.mlp_out);
    vec(p + "mlp_out_bias", blk.mlp_out_bias);
  }
  vec("head", head);
  vec("head_bias", head_bias);
}

template <typename Fn>
void DenoiserWeights::for_each(Fn&& fn) const {
  const_cast<DenoiserWeights*>(this)->for_each(
      [&](const std::string& name, Eigen::Index rows, Eigen::Index cols, double* data) {
        fn(name, rows, cols, static_cast<const double*>(data));
      });
}

}  // namespace pag
