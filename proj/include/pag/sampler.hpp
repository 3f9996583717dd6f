#pragma once

#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "pag/denoiser.hpp"
#include "pag/guidance.hpp"
#include "pag/schedule.hpp"

namespace pag {

/// (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
ImageBatch predict_x0(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                      const ImageBatch& eps);
ImageBatch predict_x0_with(double alpha_bar, const ImageBatch& x_t, const ImageBatch& eps);

/// Ancestral step: (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t z.
/// Pass z = nullptr for the noise-free step (always the case at t = 1).
ImageBatch ddpm_step(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                     const ImageBatch& eps_tilde, const ImageBatch* z);

/// Deterministic (eta = 0) jump from t to t_prev; t_prev = 0 returns x0_hat.
ImageBatch ddim_step(const NoiseSchedule& schedule, const ImageBatch& x_t, int t, int t_prev,
                     const ImageBatch& eps_tilde);

/// Evenly spaced ascending grid of `steps` timesteps in {1..T}, ending at T.
std::vector<int> ddim_timesteps(int total_steps, int steps);

enum class SamplerKind { ddpm, ddim };
std::string_view to_string(SamplerKind kind);
SamplerKind parse_sampler_kind(std::string_view name);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddim;
  int steps = 25;  // ddim only; ddpm always walks T..1
};

/// Per recorded step (recorded[i] holds sampling step index i * stride).
struct SampleTrace {
  std::vector<int> timesteps;
  std::vector<ImageBatch> x_t;
  std::vector<ImageBatch> eps;
  std::vector<ImageBatch> eps_hat;  // undesirable branch; equals eps when unguided
  std::vector<ImageBatch> eps_tilde;
  std::vector<ImageBatch> delta;
  std::vector<ImageBatch> x0_hat;   // from eps_tilde
  bool guided = false;
};

/// Called after every step with the updated state of one chunk of chains.
/// `eps_plain` is the unperturbed prediction for the sampled class.
using StepHook = std::function<void(ImageBatch& x_prev, const ImageBatch& x_t, int t,
                                    const ImageBatch& eps_plain, std::size_t first_chain)>;

struct SampleRequest {
  SamplerConfig sampler;
  GuidanceConfig guidance;
  std::size_t count = 16;
  int cls = -1;  // -1 samples unconditionally (null class)
  std::uint64_t seed = 0;
  bool trace = false;
  int trace_stride = 1;
  std::size_t threads = 0;
};

struct SampleResult {
  ImageBatch images;
  std::optional<SampleTrace> trace;
};

/// Timesteps visited by the sampler, in visiting order.
std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, const SamplerConfig& sampler);

/// Chain c draws from RngStream(seed, c), so any split of chains across
/// workers produces the same images.
SampleResult sample_loop(const Denoiser& model, const NoiseSchedule& schedule,
                         const SampleRequest& request, const StepHook& hook = {});

}  // namespace pag
