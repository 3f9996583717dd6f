#include "pag/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace pag {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"run.seed", "0", "seed for sampling, training and measurement noise"},
      {"run.out", "out", "output directory"},
      {"run.checkpoint", "out/model.pagc", "checkpoint path (written by train, read elsewhere)"},
      {"schedule.T", "100", "number of diffusion steps"},
      {"schedule.beta_start", "0.0001", "first beta of the linear schedule"},
      {"schedule.beta_end", "0.02", "last beta of the linear schedule"},
      {"model.image_side", "8", "image side in pixels (one token per pixel)"},
      {"model.token_dim", "32", "token channels"},
      {"model.blocks", "2", "attention blocks"},
      {"model.classes", "3", "number of classes (the null class is appended)"},
      {"model.cond_dropout", "0.1", "probability of training on the null class"},
      {"train.steps", "2000", "optimizer steps"},
      {"train.batch_size", "32", "images per step"},
      {"train.lr", "0.001", "Adam learning rate"},
      {"train.beta1", "0.9", "Adam first-moment decay"},
      {"train.beta2", "0.999", "Adam second-moment decay"},
      {"train.eps", "1e-8", "Adam epsilon"},
      {"train.dataset_size", "3000", "training images generated"},
      {"train.data_seed", "1", "seed of the training images"},
      {"train.heldout_n", "512", "held-out reference images written to <run.out>/heldout.pagt"},
      {"train.heldout_seed", "2", "seed of the held-out images"},
      {"sampler.kind", "ddim", "ddim | ddpm"},
      {"sampler.steps", "25", "ddim steps (ddpm walks every timestep)"},
      {"sampler.n", "64", "number of chains"},
      {"sampler.class", "null", "class label or 'null' for unconditional"},
      {"sampler.grid_columns", "0", "PGM grid columns (0 = square grid)"},
      {"guidance.mode", "pag", "none | cfg | pag | cfg_plus_pag"},
      {"guidance.s", "1.0", "PAG scale"},
      {"guidance.w", "3.0", "CFG scale"},
      {"guidance.scale", "", "shorthand: sets w for cfg, otherwise s"},
      {"guidance.perturb", "identity", "identity | random_mask | offdiag_mask | additive_noise | map_blur | condition_drop | input_blur"},
      {"guidance.layers", "deepest", "deepest | all | none | comma list of 1-based blocks"},
      {"guidance.window_start", "0", "fraction of steps before guidance starts"},
      {"guidance.window_end", "1", "fraction of steps after which guidance stops"},
      {"perturb.ratio", "0.25", "mask ratio for the masking perturbations"},
      {"perturb.seed", "0", "seed of masks and map noise"},
      {"perturb.sigma", "0.1", "std of the additive map noise"},
      {"perturb.kernel_size", "5", "map blur kernel size"},
      {"perturb.blur_sigma", "1.0", "map / input blur sigma"},
      {"trace.enabled", "false", "write a trace container from sample"},
      {"trace.stride", "1", "record every k-th step"},
      {"restore.task", "inpaint", "identity | inpaint | deblur | downsample"},
      {"restore.rect", "2,2,4,4", "inpainting hole as row,col,height,width"},
      {"restore.eta", "1.0", "data-consistency step size"},
      {"restore.noise_std", "0", "measurement noise std (used with restore.truth)"},
      {"restore.kernel_size", "5", "deblur kernel size"},
      {"restore.sigma", "1.0", "deblur kernel sigma"},
      {"restore.factor", "2", "downsampling factor"},
      {"restore.in", "", "measurement tensor y"},
      {"restore.out", "", "restored tensor path (default <run.out>/restored.pagt)"},
      {"restore.truth", "", "clean tensor to measure instead of reading restore.in"},
      {"eval.samples", "", "sample tensor"},
      {"eval.reference", "", "reference tensor"},
      {"eval.report", "", "report path (default <run.out>/report.txt)"},
      {"eval.k", "3", "neighbourhood size of the precision/recall estimator"},
      {"ablate.perturbs", "identity,random_mask,offdiag_mask,additive_noise,map_blur", "perturbations to sweep"},
      {"ablate.scales", "0,1,2", "PAG scales to sweep"},
      {"ablate.layers", "deepest", "layer sets separated by ';'"},
      {"ablate.reference_n", "512", "reference images per cell"},
      {"ablate.reference_seed", "7", "seed of the reference images"},
  };
  return keys;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

bool known_key(const std::string& key) {
  const auto& keys = config_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.name == key; });
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    parts.push_back(trim(s.substr(start, end - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

class Reader {
 public:
  explicit Reader(const ConfigValues& values) : values_(values) {}

  const std::string& text(const std::string& key) const { return values_.at(key); }

  double real(const std::string& key) const {
    const auto& s = text(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }

  long long integer(const std::string& key) const {
    const auto& s = text(key);
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw ConfigError(key + ": expected an integer, got '" + s + "'");
    }
    return v;
  }

  std::uint64_t unsigned_int(const std::string& key) const {
    const long long v = integer(key);
    if (v < 0) throw ConfigError(key + ": must be >= 0");
    return static_cast<std::uint64_t>(v);
  }

  bool boolean(const std::string& key) const {
    const auto& s = text(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + s + "'");
  }

 private:
  const ConfigValues& values_;
};

}  // namespace

ConfigValues parse_config_text(std::string_view text) {
  ConfigValues values;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(content).substr(0, eq));
    const std::string value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    values[key] = value;
  }
  return values;
}

ConfigValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::vector<int> parse_layers(std::string_view text, int num_blocks) {
  const std::string t = trim(text);
  if (t == "deepest") return {num_blocks};
  if (t == "none" || t.empty()) return {};
  if (t == "all") {
    std::vector<int> all(static_cast<std::size_t>(num_blocks));
    for (int i = 0; i < num_blocks; ++i) all[static_cast<std::size_t>(i)] = i + 1;
    return all;
  }
  std::vector<int> layers;
  for (const auto& part : split(t, ',')) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || ptr != part.data() + part.size()) {
      throw ConfigError("guidance.layers: cannot parse '" + part + "'");
    }
    if (v < 1 || v > num_blocks) {
      throw ConfigError("guidance.layers: block " + part + " outside [1, " + std::to_string(num_blocks) + "]");
    }
    if (std::find(layers.begin(), layers.end(), v) == layers.end()) layers.push_back(v);
  }
  std::sort(layers.begin(), layers.end());
  return layers;
}

std::string format_layers(const std::vector<int>& layers) {
  if (layers.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(layers[i]);
  }
  return out;
}

RunConfig resolve_config(const ConfigValues& file_values, const ConfigValues& flag_values) {
  ConfigValues merged;
  for (const auto& k : config_keys()) merged[k.name] = k.default_value;
  for (const auto* layer : {&file_values, &flag_values}) {
    for (const auto& [key, value] : *layer) {
      if (!known_key(key)) throw ConfigError("unknown config key '" + key + "'");
      merged[key] = value;
    }
  }
  const Reader r(merged);
  RunConfig c;
  c.seed = r.unsigned_int("run.seed");
  c.out_dir = r.text("run.out");
  c.checkpoint = r.text("run.checkpoint");

  c.schedule_steps = static_cast<int>(r.integer("schedule.T"));
  c.beta_start = r.real("schedule.beta_start");
  c.beta_end = r.real("schedule.beta_end");
  make_linear_schedule(c.schedule_steps, c.beta_start, c.beta_end);  // validates

  c.model.image_side = static_cast<int>(r.integer("model.image_side"));
  c.model.token_dim = static_cast<int>(r.integer("model.token_dim"));
  c.model.num_blocks = static_cast<int>(r.integer("model.blocks"));
  c.model.num_classes = static_cast<int>(r.integer("model.classes"));
  c.model.cond_dropout = r.real("model.cond_dropout");
  c.model.validate();

  c.train.steps = static_cast<int>(r.integer("train.steps"));
  c.train.batch_size = static_cast<int>(r.integer("train.batch_size"));
  c.train.adam = {r.real("train.lr"), r.real("train.beta1"), r.real("train.beta2"), r.real("train.eps")};
  c.train.seed = c.seed;
  if (c.train.steps < 0) throw ConfigError("train.steps: must be >= 0");
  if (c.train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (!(c.train.adam.lr > 0.0)) throw ConfigError("train.lr: must be > 0");
  c.dataset_size = r.unsigned_int("train.dataset_size");
  if (c.dataset_size == 0) throw ConfigError("train.dataset_size: must be >= 1");
  c.data_seed = r.unsigned_int("train.data_seed");
  c.heldout_n = r.unsigned_int("train.heldout_n");
  c.heldout_seed = r.unsigned_int("train.heldout_seed");

  c.sampler.kind = parse_sampler_kind(r.text("sampler.kind"));
  c.sampler.steps = static_cast<int>(r.integer("sampler.steps"));
  if (c.sampler.kind == SamplerKind::ddim) ddim_timesteps(c.schedule_steps, c.sampler.steps);
  c.n = r.unsigned_int("sampler.n");
  if (r.text("sampler.class") == "null") {
    c.cls = -1;
  } else {
    c.cls = static_cast<int>(r.integer("sampler.class"));
    if (c.cls < 0 || c.cls >= c.model.num_classes) {
      throw ConfigError("sampler.class: must be 'null' or in [0, " + std::to_string(c.model.num_classes - 1) + "]");
    }
  }
  c.grid_columns = r.unsigned_int("sampler.grid_columns");

  auto& g = c.guidance;
  g.mode = parse_guidance_mode(r.text("guidance.mode"));
  g.pag_scale = r.real("guidance.s");
  g.cfg_scale = r.real("guidance.w");
  if (!r.text("guidance.scale").empty()) {
    (g.mode == GuidanceMode::cfg ? g.cfg_scale : g.pag_scale) = r.real("guidance.scale");
  }
  g.perturbation.kind = parse_perturbation_kind(r.text("guidance.perturb"));
  g.perturbation.layers = parse_layers(r.text("guidance.layers"), c.model.num_blocks);
  g.perturbation.ratio = r.real("perturb.ratio");
  g.perturbation.seed = r.unsigned_int("perturb.seed");
  g.perturbation.sigma = r.real("perturb.sigma");
  g.perturbation.kernel_size = static_cast<int>(r.integer("perturb.kernel_size"));
  g.perturbation.blur_sigma = r.real("perturb.blur_sigma");
  g.window_start = r.real("guidance.window_start");
  g.window_end = r.real("guidance.window_end");
  g.perturbation.validate(c.model.num_blocks);
  g.validate(c.model.num_blocks);
  if (g.needs_null() && c.cls < 0) {
    throw ConfigError("guidance.mode " + std::string(to_string(g.mode)) + " needs sampler.class");
  }

  c.trace = r.boolean("trace.enabled");
  c.trace_stride = static_cast<int>(r.integer("trace.stride"));
  if (c.trace_stride < 1) throw ConfigError("trace.stride: must be >= 1");

  auto& m = c.measurement;
  m.kind = parse_measurement_kind(r.text("restore.task"));
  m.rect = parse_rect(r.text("restore.rect"));
  m.kernel_size = static_cast<int>(r.integer("restore.kernel_size"));
  m.sigma = r.real("restore.sigma");
  m.factor = static_cast<int>(r.integer("restore.factor"));
  m.validate(static_cast<std::size_t>(c.model.image_side));
  c.restore.eta = r.real("restore.eta");
  if (!(c.restore.eta >= 0.0)) throw ConfigError("restore.eta: must be >= 0");
  c.restore.noise_std = r.real("restore.noise_std");
  if (!(c.restore.noise_std >= 0.0)) throw ConfigError("restore.noise_std: must be >= 0");
  c.restore.guidance = c.guidance;
  c.restore.sampler = c.sampler;
  c.restore_in = r.text("restore.in");
  c.restore_out = r.text("restore.out").empty() ? c.out_dir / "restored.pagt"
                                                : std::filesystem::path(r.text("restore.out"));
  c.restore_truth = r.text("restore.truth");

  c.eval_samples = r.text("eval.samples");
  c.eval_reference = r.text("eval.reference");
  c.eval_report = r.text("eval.report").empty() ? c.out_dir / "report.txt"
                                                : std::filesystem::path(r.text("eval.report"));
  c.eval_k = static_cast<int>(r.integer("eval.k"));
  if (c.eval_k < 1) throw ConfigError("eval.k: must be >= 1");

  auto& a = c.ablate;
  for (const auto& p : split(r.text("ablate.perturbs"), ',')) {
    if (!p.empty()) a.perturbations.push_back(parse_perturbation_kind(p));
  }
  for (const auto& s : split(r.text("ablate.scales"), ',')) {
    if (s.empty()) continue;
    try {
      a.scales.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw ConfigError("ablate.scales: cannot parse '" + s + "'");
    }
    if (!(a.scales.back() >= 0.0)) throw ConfigError("ablate.scales: scales must be >= 0");
  }
  for (const auto& l : split(r.text("ablate.layers"), ';')) {
    if (!l.empty()) a.layer_sets.push_back(parse_layers(l, c.model.num_blocks));
  }
  a.reference_n = r.unsigned_int("ablate.reference_n");
  a.reference_seed = r.unsigned_int("ablate.reference_seed");

  c.threads = threads_from_env();
  c.train.threads = c.threads;
  return c;
}

}  // namespace pag
