#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "pag/config.hpp"
#include "pag/data.hpp"
#include "pag/eval.hpp"
#include "pag/sampler.hpp"

namespace pag {

// Subcommand bodies. Each returns normally on success and throws pag::Error
// subclasses on failure; run_cli maps those to exit codes.

struct TrainOutput {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_curve;
  std::filesystem::path heldout;
};
TrainOutput cmd_train(const RunConfig& config, std::ostream& log);

SampleResult cmd_sample(const RunConfig& config, std::ostream& log);

/// Writes trace.pagc and one panel PGM per chain; returns the trace.
SampleTrace cmd_trace(const RunConfig& config, std::ostream& log);

/// One row per (perturbation, scale, layer set) in sweep order.
std::string cmd_ablate(const RunConfig& config, std::ostream& log);

ImageBatch cmd_restore(const RunConfig& config, std::ostream& log);

MetricReport cmd_eval(const RunConfig& config, std::ostream& log);

/// Trace as a named-tensor container.
TensorMap trace_entries(const SampleTrace& trace);
SampleTrace trace_from_entries(const TensorMap& entries);

/// Panel for chain `chain`: rows x0_hat(eps), x0_hat(eps_hat), x0_hat(eps_tilde),
/// |delta| (the eps_hat and delta rows are omitted for unguided traces);
/// one column per recorded step.
ImageBatch trace_panel(const SampleTrace& trace, const NoiseSchedule& schedule, std::size_t chain,
                       std::size_t* rows_out = nullptr);

std::string ablation_header();

/// Parses argv (without the program name) and dispatches. Exit codes: 0
/// success, 2 configuration error, 3 numeric abort, 1 any other failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pag
