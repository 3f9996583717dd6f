#include "pag/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pag {

std::string_view to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::cfg: return "cfg";
    case GuidanceMode::pag: return "pag";
    case GuidanceMode::cfg_plus_pag: return "cfg_plus_pag";
  }
  return "none";
}

GuidanceMode parse_guidance_mode(std::string_view name) {
  for (auto m : {GuidanceMode::none, GuidanceMode::cfg, GuidanceMode::pag,
                 GuidanceMode::cfg_plus_pag}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("guidance.mode: unknown mode '" + std::string(name) + "'");
}

bool GuidanceConfig::active_at(std::size_t step_index, std::size_t total_steps) const {
  if (mode == GuidanceMode::none || total_steps == 0) return false;
  const double frac = static_cast<double>(step_index) / static_cast<double>(total_steps);
  return frac >= window_start && (frac < window_end || window_end >= 1.0);
}

void GuidanceConfig::validate(int num_blocks) const {
  if (!(pag_scale >= 0.0) || !std::isfinite(pag_scale)) {
    throw ConfigError("guidance.s: must be a finite value >= 0");
  }
  if (!(cfg_scale >= 0.0) || !std::isfinite(cfg_scale)) {
    throw ConfigError("guidance.w: must be a finite value >= 0");
  }
  if (!(window_start >= 0.0 && window_start <= window_end && window_end <= 1.0)) {
    throw ConfigError("guidance.window_start/window_end: need 0 <= start <= end <= 1");
  }
  if (needs_perturbed()) perturbation.validate(num_blocks);
}

ImageBatch pag_combine(const ImageBatch& eps, const ImageBatch& eps_hat, double s) {
  require_same_shape(eps, eps_hat, "pag_combine");
  ImageBatch out(eps.count(), eps.side());
  const auto& e = eps.values();
  const auto& h = eps_hat.values();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = e[i] + s * (e[i] - h[i]);
  return out;
}

ImageBatch cfg_combine(const ImageBatch& eps_c, const ImageBatch& eps_u, double w) {
  return pag_combine(eps_c, eps_u, w);
}

ImageBatch combined(const ImageBatch& eps_c, const ImageBatch& eps_u, const ImageBatch& eps_hat_c,
                    double w, double s) {
  require_same_shape(eps_c, eps_u, "combined");
  require_same_shape(eps_c, eps_hat_c, "combined");
  ImageBatch out(eps_c.count(), eps_c.side());
  const auto& c = eps_c.values();
  const auto& u = eps_u.values();
  const auto& h = eps_hat_c.values();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = c[i] + w * (c[i] - u[i]) + s * (c[i] - h[i]);
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

ImageBatch delta_map(const ImageBatch& eps, const ImageBatch& eps_hat) {
  require_same_shape(eps, eps_hat, "delta_map");
  ImageBatch out(eps.count(), eps.side());
  for (std::size_t i = 0; i < eps.count(); ++i) {
    auto e = eps.image(i);
    auto h = eps_hat.image(i);
    auto o = out.image(i);
    for (std::size_t p = 0; p < o.size(); ++p) o[p] = std::abs(e[p] - h[p]);
    const double cap = percentile({o.begin(), o.end()}, 0.995);
    for (auto& v : o) v = std::min(v, cap);
  }
  return out;
}

}  // namespace pag
