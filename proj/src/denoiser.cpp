#include "pag/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "pag/image_ops.hpp"

namespace pag {

namespace {

constexpr double kNormEps = 1e-5;

void sinusoid(double position, int dim, double* out) {
  for (int j = 0; j < dim; ++j) {
    const int k = j / 2;
    const double freq = std::pow(10000.0, -2.0 * k / static_cast<double>(dim));
    out[j] = (j % 2 == 0) ? std::sin(position * freq) : std::cos(position * freq);
  }
}

// Fixed 2-D encoding: first half of the channels encodes the row, second half
// the column. Frequencies pi (k + 1) / side resolve every offset on the grid;
// geometric frequencies from 1 to 1/10000 leave the upper channels constant
// across 8 positions.
void grid_sinusoid(int position, int side, int dim, double* out) {
  for (int j = 0; j < dim; ++j) {
    const double freq = std::numbers::pi * (j / 2 + 1) / side;
    out[j] = (j % 2 == 0) ? std::sin(position * freq) : std::cos(position * freq);
  }
}

Matrix positional_encoding(int side, int dim) {
  Matrix pos(side * side, dim);
  const int row_dim = dim / 2;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      double* dst = pos.row(r * side + c).data();
      grid_sinusoid(r, side, row_dim, dst);
      grid_sinusoid(c, side, dim - row_dim, dst + row_dim);
    }
  }
  return pos;
}

RowVector time_features(int t, int dim) {
  RowVector f(dim);
  sinusoid(static_cast<double>(t), dim, f.data());
  return f;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct NormCache {
  Matrix normalized;
  Eigen::VectorXd inv_std;
};

Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias,
                  NormCache* cache) {
  const Eigen::Index rows = x.rows();
  const double cols = static_cast<double>(x.cols());
  Matrix normalized(x.rows(), x.cols());
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).sum() / cols;
    const RowVector centered = x.row(r).array() - mean;
    const double var = centered.squaredNorm() / cols;
    inv_std(r) = 1.0 / std::sqrt(var + kNormEps);
    normalized.row(r) = centered * inv_std(r);
  }
  Matrix y = (normalized.array().rowwise() * gain.array()).rowwise() + bias.array();
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const RowVector& gain, const NormCache& cache,
                           RowVector& dgain, RowVector& dbias) {
  dgain += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const Matrix dnorm = dy.array().rowwise() * gain.array();
  const double cols = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dnorm.row(r).sum() / cols;
    const double mean_dx = dnorm.row(r).dot(cache.normalized.row(r)) / cols;
    dx.row(r) = (dnorm.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dx) *
                cache.inv_std(r);
  }
  return dx;
}

void softmax_rows(Matrix& logits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double peak = row.maxCoeff();
    if (peak == -std::numeric_limits<double>::infinity()) {
      // Row starvation: every logit masked, fall back to the identity row.
      row.setZero();
      row(r) = 1.0;
      continue;
    }
    double total = 0.0;
    for (Eigen::Index c = 0; c < row.size(); ++c) {
      row(c) = std::exp(row(c) - peak);
      total += row(c);
    }
    row /= total;
  }
}

void renormalize_rows(Matrix& map) {
  for (Eigen::Index r = 0; r < map.rows(); ++r) {
    auto row = map.row(r);
    row = row.cwiseMax(0.0);
    const double total = row.sum();
    if (!(total > 0.0)) {
      row.setZero();
      row(r) = 1.0;
    } else {
      row /= total;
    }
  }
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite input to ") + what);
}

struct BlockCache {
  NormCache attn_norm;
  Matrix normed;  // attention-norm output
  Matrix q, k, v, map, attended;
  NormCache mlp_norm;
  Matrix mlp_normed;
  Matrix pre_act, act;
};

struct ImageCache {
  RowVector time_feat;
  int cls = 0;
  std::vector<BlockCache> blocks;
  Matrix final_tokens;
};

Matrix run_block(const AttentionBlockWeights& blk, const Matrix& h, const PerturbationSpec& spec,
                 int block_index, BlockCache* cache, Matrix* map_out) {
  NormCache norm1;
  const Matrix a = layer_norm(h, blk.attn_norm_gain, blk.attn_norm_bias, &norm1);
  Matrix q = a * blk.query;
  Matrix k = a * blk.key;
  Matrix v = a * blk.value;
  AttentionResult attn = (spec.attention_level() && spec.applies_to(block_index))
                             ? perturbed_self_attention(q, k, v, spec, block_index)
                             : self_attention(q, k, v);
  Matrix h_mid = h + attn.output * blk.out;
  h_mid.rowwise() += blk.out_bias;

  NormCache norm2;
  const Matrix m = layer_norm(h_mid, blk.mlp_norm_gain, blk.mlp_norm_bias, &norm2);
  Matrix pre = m * blk.mlp_in;
  pre.rowwise() += blk.mlp_in_bias;
  Matrix act = pre.unaryExpr(&gelu);
  Matrix h_out = h_mid + act * blk.mlp_out;
  h_out.rowwise() += blk.mlp_out_bias;

  if (map_out != nullptr) *map_out = attn.map;
  if (cache != nullptr) {
    cache->attn_norm = std::move(norm1);
    cache->normed = a;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->map = std::move(attn.map);
    cache->attended = std::move(attn.output);
    cache->mlp_norm = std::move(norm2);
    cache->mlp_normed = m;
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return h_out;
}

Matrix block_backward(const AttentionBlockWeights& blk, const BlockCache& c, const Matrix& dout,
                      AttentionBlockWeights& g) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.q.cols()));
  // MLP branch.
  g.mlp_out.noalias() += c.act.transpose() * dout;
  g.mlp_out_bias += dout.colwise().sum();
  Matrix dpre = dout * blk.mlp_out.transpose();
  dpre.array() *= c.pre_act.unaryExpr(&gelu_grad).array();
  g.mlp_in.noalias() += c.mlp_normed.transpose() * dpre;
  g.mlp_in_bias += dpre.colwise().sum();
  const Matrix dm = dpre * blk.mlp_in.transpose();
  Matrix dmid = dout + layer_norm_backward(dm, blk.mlp_norm_gain, c.mlp_norm, g.mlp_norm_gain,
                                           g.mlp_norm_bias);
  // Attention branch.
  g.out.noalias() += c.attended.transpose() * dmid;
  g.out_bias += dmid.colwise().sum();
  const Matrix dattended = dmid * blk.out.transpose();
  const Matrix dmap = dattended * c.v.transpose();
  const Matrix dv = c.map.transpose() * dattended;
  const Eigen::VectorXd row_dot = (dmap.array() * c.map.array()).rowwise().sum();
  const Matrix dlogits = (c.map.array() * (dmap.array().colwise() - row_dot.array())) * scale;
  const Matrix dq = dlogits * c.k;
  const Matrix dk = dlogits.transpose() * c.q;
  g.query.noalias() += c.normed.transpose() * dq;
  g.key.noalias() += c.normed.transpose() * dk;
  g.value.noalias() += c.normed.transpose() * dv;
  const Matrix da =
      dq * blk.query.transpose() + dk * blk.key.transpose() + dv * blk.value.transpose();
  return dmid + layer_norm_backward(da, blk.attn_norm_gain, c.attn_norm, g.attn_norm_gain,
                                    g.attn_norm_bias);
}

Matrix embed(const DenoiserWeights& w, std::span<const double> pixels, int t, int cls,
             RowVector* time_feat_out) {
  const int d = w.config.token_dim;
  const Eigen::Map<const Eigen::VectorXd> x(pixels.data(), static_cast<Eigen::Index>(pixels.size()));
  Matrix h = x * w.pixel_lift;
  h += positional_encoding(w.config.image_side, d);
  const RowVector tf = time_features(t, d);
  const RowVector shared = w.pixel_bias + tf * w.time_proj + w.time_bias + w.class_embed.row(cls);
  h.rowwise() += shared;
  if (time_feat_out != nullptr) *time_feat_out = tf;
  return h;
}

// Predicted noise for one image; fills cache for backprop and taps for tests.
Eigen::VectorXd forward_image(const DenoiserWeights& w, std::span<const double> pixels, int t,
                              int cls, const PerturbationSpec& spec, ImageCache* cache,
                              std::vector<Matrix>* block_inputs, std::vector<Matrix>* maps,
                              Matrix* final_tokens) {
  Matrix h = embed(w, pixels, t, cls, cache != nullptr ? &cache->time_feat : nullptr);
  if (cache != nullptr) {
    cache->cls = cls;
    cache->blocks.resize(w.blocks.size());
  }
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    if (block_inputs != nullptr) block_inputs->push_back(h);
    Matrix map;
    h = run_block(w.blocks[b], h, spec, static_cast<int>(b) + 1,
                  cache != nullptr ? &cache->blocks[b] : nullptr, maps != nullptr ? &map : nullptr);
    if (maps != nullptr) maps->push_back(std::move(map));
  }
  Eigen::VectorXd out = h * w.head.transpose();
  out.array() += w.head_bias(0);
  if (final_tokens != nullptr) *final_tokens = h;
  if (cache != nullptr) cache->final_tokens = std::move(h);
  return out;
}

void image_backward(const DenoiserWeights& w, std::span<const double> pixels, const ImageCache& c,
                    const Eigen::VectorXd& dout, DenoiserWeights& g) {
  g.head += dout.transpose() * c.final_tokens;
  g.head_bias(0) += dout.sum();
  Matrix dh = dout * w.head;
  for (std::size_t b = w.blocks.size(); b-- > 0;) {
    dh = block_backward(w.blocks[b], c.blocks[b], dh, g.blocks[b]);
  }
  const Eigen::Map<const Eigen::VectorXd> x(pixels.data(), static_cast<Eigen::Index>(pixels.size()));
  g.pixel_lift += x.transpose() * dh;
  const RowVector dshared = dh.colwise().sum();
  g.pixel_bias += dshared;
  g.time_proj.noalias() += c.time_feat.transpose() * dshared;
  g.time_bias += dshared;
  g.class_embed.row(c.cls) += dshared;
}

void allocate(DenoiserWeights& w) {
  const auto& cfg = w.config;
  const int d = cfg.token_dim;
  const int hidden = cfg.mlp_dim();
  w.pixel_lift = RowVector::Zero(d);
  w.pixel_bias = RowVector::Zero(d);
  w.time_proj = Matrix::Zero(d, d);
  w.time_bias = RowVector::Zero(d);
  w.class_embed = Matrix::Zero(cfg.num_classes + 1, d);
  w.blocks.assign(static_cast<std::size_t>(cfg.num_blocks), AttentionBlockWeights{});
  for (auto& blk : w.blocks) {
    blk.attn_norm_gain = RowVector::Zero(d);
    blk.attn_norm_bias = RowVector::Zero(d);
    blk.query = Matrix::Zero(d, d);
    blk.key = Matrix::Zero(d, d);
    blk.value = Matrix::Zero(d, d);
    blk.out = Matrix::Zero(d, d);
    blk.out_bias = RowVector::Zero(d);
    blk.mlp_norm_gain = RowVector::Zero(d);
    blk.mlp_norm_bias = RowVector::Zero(d);
    blk.mlp_in = Matrix::Zero(d, hidden);
    blk.mlp_in_bias = RowVector::Zero(hidden);
    blk.mlp_out = Matrix::Zero(hidden, d);
    blk.mlp_out_bias = RowVector::Zero(d);
  }
  w.head = RowVector::Zero(d);
  w.head_bias = RowVector::Zero(1);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void DenoiserConfig::validate() const {
  if (image_side < 2) throw ConfigError("model.image_side: must be >= 2");
  if (token_dim < 4) throw ConfigError("model.token_dim: must be >= 4");
  if (num_blocks < 1) throw ConfigError("model.blocks: must be >= 1");
  if (num_classes < 1) throw ConfigError("model.classes: must be >= 1");
  if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) {
    throw ConfigError("model.cond_dropout: must lie in [0, 1]");
  }
}

std::size_t DenoiserWeights::parameter_count() const {
  std::size_t total = 0;
  for_each([&](const std::string&, Eigen::Index r, Eigen::Index c, const double*) {
    total += static_cast<std::size_t>(r * c);
  });
  return total;
}

bool DenoiserWeights::operator==(const DenoiserWeights& other) const {
  if (!(config == other.config)) return false;
  std::vector<std::pair<std::size_t, const double*>> mine, theirs;
  for_each([&](const std::string&, Eigen::Index r, Eigen::Index c, const double* p) {
    mine.emplace_back(static_cast<std::size_t>(r * c), p);
  });
  other.for_each([&](const std::string&, Eigen::Index r, Eigen::Index c, const double* p) {
    theirs.emplace_back(static_cast<std::size_t>(r * c), p);
  });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].first != theirs[i].first) return false;
    if (std::memcmp(mine[i].second, theirs[i].second, mine[i].first * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

DenoiserWeights zeros_like(const DenoiserWeights& w) {
  DenoiserWeights z = w;
  z.for_each([](const std::string&, Eigen::Index r, Eigen::Index c, double* p) {
    std::fill(p, p + r * c, 0.0);
  });
  return z;
}

DenoiserWeights init_weights(const DenoiserConfig& config, std::uint64_t seed, bool random_head) {
  config.validate();
  DenoiserWeights w;
  w.config = config;
  allocate(w);
  RngStream rng(seed, 0x1417);
  w.for_each([&](const std::string& name, Eigen::Index r, Eigen::Index c, double* p) {
    const auto n = r * c;
    if (ends_with(name, "gain")) {
      std::fill(p, p + n, 1.0);
    } else if (ends_with(name, "bias") || (name == "head" && !random_head)) {
      std::fill(p, p + n, 0.0);
    } else {
      double sc = 0.02;
      if (name == "pixel_lift") {
        sc = 1.0;
      } else if (r > 1) {
        sc = 1.0 / std::sqrt(static_cast<double>(r));
      }
      for (Eigen::Index i = 0; i < n; ++i) p[i] = sc * rng.gaussian();
    }
  });
  return w;
}

std::string_view to_string(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::none: return "none";
    case PerturbationKind::identity_map: return "identity";
    case PerturbationKind::random_mask: return "random_mask";
    case PerturbationKind::offdiag_mask: return "offdiag_mask";
    case PerturbationKind::additive_noise: return "additive_noise";
    case PerturbationKind::map_blur: return "map_blur";
    case PerturbationKind::condition_drop: return "condition_drop";
    case PerturbationKind::input_blur: return "input_blur";
  }
  return "none";
}

PerturbationKind parse_perturbation_kind(std::string_view name) {
  if (name == "identity_map") return PerturbationKind::identity_map;
  for (auto k : {PerturbationKind::none, PerturbationKind::identity_map,
                 PerturbationKind::random_mask, PerturbationKind::offdiag_mask,
                 PerturbationKind::additive_noise, PerturbationKind::map_blur,
                 PerturbationKind::condition_drop, PerturbationKind::input_blur}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("guidance.perturb: unknown perturbation '" + std::string(name) + "'");
}

PerturbationSpec PerturbationSpec::identity(std::vector<int> layers) {
  PerturbationSpec spec;
  spec.kind = PerturbationKind::identity_map;
  spec.layers = std::move(layers);
  return spec;
}

PerturbationSpec PerturbationSpec::condition_drop() {
  PerturbationSpec spec;
  spec.kind = PerturbationKind::condition_drop;
  return spec;
}

bool PerturbationSpec::attention_level() const {
  switch (kind) {
    case PerturbationKind::identity_map:
    case PerturbationKind::random_mask:
    case PerturbationKind::offdiag_mask:
    case PerturbationKind::additive_noise:
    case PerturbationKind::map_blur:
      return true;
    default:
      return false;
  }
}

bool PerturbationSpec::applies_to(int block) const {
  return std::find(layers.begin(), layers.end(), block) != layers.end();
}

void PerturbationSpec::validate(int num_blocks) const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("perturb.ratio: must lie in [0, 1]");
  if (!(sigma >= 0.0)) throw ConfigError("perturb.sigma: must be >= 0");
  if (!(blur_sigma >= 0.0)) throw ConfigError("perturb.blur_sigma: must be >= 0");
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ConfigError("perturb.kernel_size: must be odd and >= 1");
  }
  for (int layer : layers) {
    if (layer < 1 || layer > num_blocks) {
      throw ConfigError("guidance.layers: block " + std::to_string(layer) + " outside [1, " +
                        std::to_string(num_blocks) + "]");
    }
  }
}

AttentionResult self_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  require_finite(q, "self_attention");
  require_finite(k, "self_attention");
  require_finite(v, "self_attention");
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols()) {
    throw DimensionError("self_attention: Q, K, V shapes disagree");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix map = (q * k.transpose()) * scale;
  softmax_rows(map);
  Matrix out = map * v;
  return {std::move(out), std::move(map)};
}

std::vector<bool> attention_keep_mask(std::size_t tokens, const PerturbationSpec& spec,
                                      int block) {
  std::vector<bool> keep(tokens * tokens, true);
  RngStream rng(spec.seed, 0x6d61736bull + static_cast<std::uint64_t>(block));
  for (std::size_t r = 0; r < tokens; ++r) {
    for (std::size_t c = 0; c < tokens; ++c) {
      const bool drop = rng.uniform() < spec.ratio;
      if (spec.kind == PerturbationKind::offdiag_mask && r == c) continue;
      keep[r * tokens + c] = !drop;
    }
  }
  return keep;
}

AttentionResult perturbed_self_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const PerturbationSpec& spec, int block) {
  if (!spec.attention_level()) {
    throw ConfigError("perturbation '" + std::string(to_string(spec.kind)) +
                      "' does not act on the attention map");
  }
  require_finite(q, "perturbed_self_attention");
  require_finite(k, "perturbed_self_attention");
  require_finite(v, "perturbed_self_attention");
  const Eigen::Index n = q.rows();
  if (spec.kind == PerturbationKind::identity_map) {
    return {v, Matrix::Identity(n, n)};
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix map = (q * k.transpose()) * scale;
  switch (spec.kind) {
    case PerturbationKind::random_mask:
    case PerturbationKind::offdiag_mask: {
      const auto keep = attention_keep_mask(static_cast<std::size_t>(n), spec, block);
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index c = 0; c < n; ++c) {
          if (!keep[static_cast<std::size_t>(r * n + c)]) {
            map(r, c) = -std::numeric_limits<double>::infinity();
          }
        }
      }
      softmax_rows(map);
      break;
    }
    case PerturbationKind::additive_noise: {
      softmax_rows(map);
      RngStream rng(spec.seed, 0x6e6f6973ull + static_cast<std::uint64_t>(block));
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index c = 0; c < n; ++c) map(r, c) += spec.sigma * rng.gaussian();
      }
      renormalize_rows(map);
      break;
    }
    case PerturbationKind::map_blur: {
      softmax_rows(map);
      const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
      if (static_cast<Eigen::Index>(side * side) != n) {
        throw DimensionError("map_blur: token count is not a square grid");
      }
      const auto kernel = gaussian_kernel(spec.kernel_size, spec.blur_sigma);
      RowVector blurred(n);
      for (Eigen::Index r = 0; r < n; ++r) {
        blur_image({map.row(r).data(), static_cast<std::size_t>(n)},
                   {blurred.data(), static_cast<std::size_t>(n)}, side, kernel, Padding::zero);
        map.row(r) = blurred;
      }
      renormalize_rows(map);
      break;
    }
    default:
      break;
  }
  Matrix out = map * v;
  return {std::move(out), std::move(map)};
}

Denoiser::Denoiser(DenoiserWeights weights) : weights_(std::move(weights)) {
  weights_.config.validate();
}

ImageBatch Denoiser::forward(const ImageBatch& x_t, int t, std::span<const int> classes,
                             const PerturbationSpec& spec, ForwardTaps* taps) const {
  const auto& cfg = weights_.config;
  if (x_t.side() != static_cast<std::size_t>(cfg.image_side)) {
    throw DimensionError("forward: image side " + std::to_string(x_t.side()) +
                         " does not match model side " + std::to_string(cfg.image_side));
  }
  if (classes.size() != 1 && classes.size() != x_t.count()) {
    throw DimensionError("forward: need one class label per image or a single label");
  }
  for (int c : classes) {
    if (c < 0 || c > cfg.num_classes) {
      throw InputError("class index " + std::to_string(c) + " outside [0, " +
                       std::to_string(cfg.num_classes) + "]");
    }
  }
  if (!all_finite(x_t.values())) throw NumericError("forward: non-finite x_t");
  evaluations_.fetch_add(1);

  std::vector<double> kernel;
  if (spec.kind == PerturbationKind::input_blur) {
    kernel = gaussian_kernel(kernel_size_for(spec.blur_sigma), spec.blur_sigma);
  }
  if (taps != nullptr) {
    taps->block_inputs.assign(x_t.count(), {});
    taps->attention_maps.assign(x_t.count(), {});
    taps->final_tokens.assign(x_t.count(), Matrix());
  }
  ImageBatch out(x_t.count(), x_t.side());
  std::vector<double> blurred(x_t.pixels());
  for (std::size_t i = 0; i < x_t.count(); ++i) {
    int cls = classes.size() == 1 ? classes[0] : classes[i];
    if (spec.kind == PerturbationKind::condition_drop) cls = cfg.null_class();
    std::span<const double> pixels = x_t.image(i);
    if (spec.kind == PerturbationKind::input_blur) {
      blur_image(pixels, blurred, x_t.side(), kernel, Padding::clamp);
      pixels = blurred;
    }
    const Eigen::VectorXd eps = forward_image(
        weights_, pixels, t, cls, spec, nullptr, taps ? &taps->block_inputs[i] : nullptr,
        taps ? &taps->attention_maps[i] : nullptr, taps ? &taps->final_tokens[i] : nullptr);
    std::copy(eps.data(), eps.data() + eps.size(), out.image(i).begin());
  }
  return out;
}

LossDraw draw_loss_inputs(const NoiseSchedule& schedule, const ImageBatch& batch,
                          std::span<const int> classes, double cond_dropout, int null_class,
                          RngStream& rng) {
  if (classes.size() != batch.count()) {
    throw DimensionError("loss: need one class label per image");
  }
  LossDraw draw;
  draw.timesteps.resize(batch.count());
  draw.classes.resize(batch.count());
  draw.noise = ImageBatch(batch.count(), batch.side());
  draw.noisy = ImageBatch(batch.count(), batch.side());
  for (std::size_t i = 0; i < batch.count(); ++i) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
    draw.timesteps[i] = t;
    rng.fill_gaussian(draw.noise.image(i));
    draw.classes[i] = rng.uniform() < cond_dropout ? null_class : classes[i];
    const double signal = std::sqrt(schedule.alpha_bar(t));
    const double noise = std::sqrt(1.0 - schedule.alpha_bar(t));
    auto x0 = batch.image(i);
    auto e = draw.noise.image(i);
    auto xt = draw.noisy.image(i);
    for (std::size_t p = 0; p < xt.size(); ++p) xt[p] = signal * x0[p] + noise * e[p];
  }
  return draw;
}

double mse_loss(const LossDraw& draw, const ImageBatch& prediction) {
  require_same_shape(draw.noise, prediction, "mse_loss");
  double total = 0.0;
  const auto& e = draw.noise.values();
  const auto& p = prediction.values();
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double diff = e[i] - p[i];
    total += diff * diff;
  }
  return total / static_cast<double>(e.size());
}

double loss_on(const DenoiserWeights& weights, const LossDraw& draw) {
  ImageBatch pred(draw.noisy.count(), draw.noisy.side());
  const PerturbationSpec none;
  for (std::size_t i = 0; i < draw.noisy.count(); ++i) {
    const Eigen::VectorXd eps = forward_image(weights, draw.noisy.image(i), draw.timesteps[i],
                                              draw.classes[i], none, nullptr, nullptr, nullptr,
                                              nullptr);
    std::copy(eps.data(), eps.data() + eps.size(), pred.image(i).begin());
  }
  return mse_loss(draw, pred);
}

double loss(const DenoiserWeights& weights, const NoiseSchedule& schedule, const ImageBatch& batch,
            std::span<const int> classes, RngStream& rng) {
  const auto draw = draw_loss_inputs(schedule, batch, classes, weights.config.cond_dropout,
                                     weights.config.null_class(), rng);
  return loss_on(weights, draw);
}

LossAndGrad loss_and_grad(const DenoiserWeights& weights, const LossDraw& draw, double scale,
                          std::size_t threads) {
  const std::size_t count = draw.noisy.count();
  const double norm = 2.0 * scale / static_cast<double>(draw.noisy.size());
  ImageBatch pred(count, draw.noisy.side());
  std::vector<DenoiserWeights> per_image(count);
  const PerturbationSpec none;
  parallel_for(count, threads, [&](std::size_t i) {
    ImageCache cache;
    const Eigen::VectorXd eps = forward_image(weights, draw.noisy.image(i), draw.timesteps[i],
                                              draw.classes[i], none, &cache, nullptr, nullptr,
                                              nullptr);
    std::copy(eps.data(), eps.data() + eps.size(), pred.image(i).begin());
    const Eigen::Map<const Eigen::VectorXd> target(draw.noise.image(i).data(), eps.size());
    const Eigen::VectorXd dout = norm * (eps - target);
    per_image[i] = zeros_like(weights);
    image_backward(weights, draw.noisy.image(i), cache, dout, per_image[i]);
  });
  LossAndGrad result{mse_loss(draw, pred), zeros_like(weights)};
  std::vector<double*> total;
  result.grad.for_each(
      [&](const std::string&, Eigen::Index, Eigen::Index, double* p) { total.push_back(p); });
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t idx = 0;
    per_image[i].for_each([&](const std::string&, Eigen::Index r, Eigen::Index c, double* p) {
      double* dst = total[idx++];
      for (Eigen::Index j = 0; j < r * c; ++j) dst[j] += p[j];
    });
  }
  return result;
}

DenoiserWeights grad(const DenoiserWeights& weights, const NoiseSchedule& schedule,
                     const ImageBatch& batch, std::span<const int> classes, RngStream& rng,
                     double scale, std::size_t threads) {
  const auto draw = draw_loss_inputs(schedule, batch, classes, weights.config.cond_dropout,
                                     weights.config.null_class(), rng);
  auto result = loss_and_grad(weights, draw, scale, threads);
  result.grad.for_each([](const std::string& name, Eigen::Index r, Eigen::Index c, double* p) {
    if (!all_finite({p, static_cast<std::size_t>(r * c)})) {
      throw NumericError("non-finite gradient in tensor '" + name + "'");
    }
  });
  return std::move(result.grad);
}

TrainResult train(const DenoiserConfig& config, const NoiseSchedule& schedule,
                  const ImageBatch& data, std::span<const int> labels,
                  const TrainOptions& options) {
  config.validate();
  if (options.steps < 0) throw ConfigError("train.steps: must be >= 0");
  if (options.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (data.count() == 0 || labels.size() != data.count()) {
    throw InputError("train: dataset is empty or labels do not match images");
  }
  TrainResult result{init_weights(config, options.seed), {}};
  result.loss_curve.reserve(static_cast<std::size_t>(options.steps));
  DenoiserWeights first = zeros_like(result.weights);
  DenoiserWeights second = zeros_like(result.weights);

  RngStream batch_rng(options.seed, 1);
  RngStream loss_rng(options.seed, 2);
  const auto& adam = options.adam;
  const auto bsz = static_cast<std::size_t>(options.batch_size);
  ImageBatch batch(bsz, data.side());
  std::vector<int> batch_labels(bsz);

  for (int step = 0; step < options.steps; ++step) {
    for (std::size_t i = 0; i < bsz; ++i) {
      const auto idx = batch_rng.below(data.count());
      const auto src = data.image(idx);
      std::copy(src.begin(), src.end(), batch.image(i).begin());
      batch_labels[i] = labels[idx];
    }
    const auto draw = draw_loss_inputs(schedule, batch, batch_labels, config.cond_dropout,
                                       config.null_class(), loss_rng);
    LossAndGrad lg;
    try {
      lg = loss_and_grad(result.weights, draw, 1.0, options.threads);
    } catch (const NumericError& e) {
      throw NumericError(std::string("training diverged: ") + e.what(), step);
    }
    if (!std::isfinite(lg.loss)) throw NumericError("training loss is not finite", step);
    result.loss_curve.push_back(lg.loss);

    const double t = static_cast<double>(step + 1);
    const double correct1 = 1.0 - std::pow(adam.beta1, t);
    const double correct2 = 1.0 - std::pow(adam.beta2, t);
    std::vector<double*> g_ptr, m_ptr, v_ptr;
    lg.grad.for_each([&](const std::string&, Eigen::Index, Eigen::Index, double* p) { g_ptr.push_back(p); });
    first.for_each([&](const std::string&, Eigen::Index, Eigen::Index, double* p) { m_ptr.push_back(p); });
    second.for_each([&](const std::string&, Eigen::Index, Eigen::Index, double* p) { v_ptr.push_back(p); });
    std::size_t idx = 0;
    result.weights.for_each([&](const std::string&, Eigen::Index r, Eigen::Index c, double* w) {
      const double* g = g_ptr[idx];
      double* m = m_ptr[idx];
      double* v = v_ptr[idx];
      ++idx;
      for (Eigen::Index j = 0; j < r * c; ++j) {
        m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * g[j];
        v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * g[j] * g[j];
        const double m_hat = m[j] / correct1;
        const double v_hat = v[j] / correct2;
        w[j] -= adam.lr * m_hat / (std::sqrt(v_hat) + adam.eps);
      }
    });
  }
  return result;
}

}  // namespace pag
