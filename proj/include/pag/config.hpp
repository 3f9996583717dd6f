#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pag/denoiser.hpp"
#include "pag/guidance.hpp"
#include "pag/inverse.hpp"
#include "pag/sampler.hpp"

namespace pag {

/// Raw dotted-key settings, e.g. {"guidance.s", "1.0"}.
using ConfigValues = std::map<std::string, std::string>;

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default, in display order.
const std::vector<ConfigKey>& config_keys();

/// `key = value` lines, `#` comments, blank lines ignored.
ConfigValues parse_config_text(std::string_view text);
ConfigValues read_config_file(const std::filesystem::path& path);

struct AblationPlan {
  std::vector<PerturbationKind> perturbations;
  std::vector<double> scales;
  std::vector<std::vector<int>> layer_sets;
  std::size_t reference_n = 512;
  std::uint64_t reference_seed = 7;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::filesystem::path checkpoint;

  int schedule_steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  DenoiserConfig model;
  TrainOptions train;
  std::size_t dataset_size = 3000;
  std::uint64_t data_seed = 1;
  std::size_t heldout_n = 512;
  std::uint64_t heldout_seed = 2;

  SamplerConfig sampler;
  std::size_t n = 64;
  int cls = -1;
  std::size_t grid_columns = 0;
  GuidanceConfig guidance;
  bool trace = false;
  int trace_stride = 1;

  MeasurementOp measurement;
  RestoreConfig restore;
  std::filesystem::path restore_in;
  std::filesystem::path restore_out;
  std::filesystem::path restore_truth;

  std::filesystem::path eval_samples;
  std::filesystem::path eval_reference;
  std::filesystem::path eval_report;
  int eval_k = 3;

  AblationPlan ablate;
  std::size_t threads = 0;
};

/// Layer list: "deepest", "all", "none", or comma-separated 1-based indices.
std::vector<int> parse_layers(std::string_view text, int num_blocks);
std::string format_layers(const std::vector<int>& layers);

/// Merges defaults < file < flags, rejects unknown keys, converts and validates.
RunConfig resolve_config(const ConfigValues& file_values, const ConfigValues& flag_values);

}  // namespace pag
