#include "pag/inverse.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <string>

#include "pag/image_ops.hpp"

namespace pag {

std::string_view to_string(MeasurementKind kind) {
  switch (kind) {
    case MeasurementKind::identity: return "identity";
    case MeasurementKind::box_mask: return "inpaint";
    case MeasurementKind::gaussian_blur: return "deblur";
    case MeasurementKind::downsample: return "downsample";
  }
  return "identity";
}

MeasurementKind parse_measurement_kind(std::string_view name) {
  if (name == "box_mask") return MeasurementKind::box_mask;
  if (name == "gaussian_blur") return MeasurementKind::gaussian_blur;
  for (auto k : {MeasurementKind::identity, MeasurementKind::box_mask,
                 MeasurementKind::gaussian_blur, MeasurementKind::downsample}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("restore.task: unknown task '" + std::string(name) + "'");
}

Rect parse_rect(std::string_view text) {
  std::istringstream in{std::string(text)};
  Rect r;
  char c1 = 0, c2 = 0, c3 = 0;
  if (!(in >> r.row >> c1 >> r.col >> c2 >> r.height >> c3 >> r.width) || c1 != ',' ||
      c2 != ',' || c3 != ',' || !(in >> std::ws).eof()) {
    throw ConfigError("restore.rect: expected 'row,col,height,width', got '" + std::string(text) + "'");
  }
  if (r.height < 0 || r.width < 0) throw ConfigError("restore.rect: negative extent");
  return r;
}

MeasurementOp MeasurementOp::box(Rect r) {
  MeasurementOp op;
  op.kind = MeasurementKind::box_mask;
  op.rect = r;
  return op;
}

void MeasurementOp::validate(std::size_t side) const {
  if (kind == MeasurementKind::downsample) {
    if (factor < 1 || side % static_cast<std::size_t>(factor) != 0) {
      throw ConfigError("restore.factor: must be >= 1 and divide the image side");
    }
  }
  if (kind == MeasurementKind::gaussian_blur) {
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("restore.kernel_size: must be odd and >= 1");
    if (!(sigma >= 0.0)) throw ConfigError("restore.sigma: must be >= 0");
  }
}

std::size_t MeasurementOp::output_side(std::size_t side) const {
  return kind == MeasurementKind::downsample ? side / static_cast<std::size_t>(factor) : side;
}

ImageBatch MeasurementOp::apply(const ImageBatch& x) const {
  validate(x.side());
  const std::size_t side = x.side();
  ImageBatch out(x.count(), output_side(side));
  switch (kind) {
    case MeasurementKind::identity:
      out = x;
      break;
    case MeasurementKind::box_mask:
      out = x;
      for (std::size_t i = 0; i < x.count(); ++i) {
        for (std::size_t r = 0; r < side; ++r) {
          for (std::size_t c = 0; c < side; ++c) {
            if (rect.contains(static_cast<int>(r), static_cast<int>(c))) out.at(i, r, c) = 0.0;
          }
        }
      }
      break;
    case MeasurementKind::gaussian_blur: {
      const auto kernel = gaussian_kernel(kernel_size, sigma);
      for (std::size_t i = 0; i < x.count(); ++i) {
        blur_image(x.image(i), out.image(i), side, kernel, Padding::zero);
      }
      break;
    }
    case MeasurementKind::downsample: {
      const auto f = static_cast<std::size_t>(factor);
      const double inv = 1.0 / static_cast<double>(f * f);
      for (std::size_t i = 0; i < x.count(); ++i) {
        for (std::size_t r = 0; r < out.side(); ++r) {
          for (std::size_t c = 0; c < out.side(); ++c) {
            double acc = 0.0;
            for (std::size_t dr = 0; dr < f; ++dr) {
              for (std::size_t dc = 0; dc < f; ++dc) acc += x.at(i, r * f + dr, c * f + dc);
            }
            out.at(i, r, c) = acc * inv;
          }
        }
      }
      break;
    }
  }
  return out;
}

ImageBatch MeasurementOp::adjoint(const ImageBatch& y, std::size_t input_side) const {
  validate(input_side);
  if (y.side() != output_side(input_side)) throw DimensionError("adjoint: measurement size mismatch");
  switch (kind) {
    case MeasurementKind::identity:
    case MeasurementKind::box_mask:
    case MeasurementKind::gaussian_blur:
      // Masking and zero-padded symmetric blurring are self-adjoint.
      return apply(y);
    case MeasurementKind::downsample: {
      const auto f = static_cast<std::size_t>(factor);
      const double inv = 1.0 / static_cast<double>(f * f);
      ImageBatch out(y.count(), input_side);
      for (std::size_t i = 0; i < y.count(); ++i) {
        for (std::size_t r = 0; r < input_side; ++r) {
          for (std::size_t c = 0; c < input_side; ++c) out.at(i, r, c) = y.at(i, r / f, c / f) * inv;
        }
      }
      return out;
    }
  }
  return y;
}

ImageBatch measure(const ImageBatch& x0, const MeasurementOp& op, double noise_std,
                   std::uint64_t seed) {
  if (!(noise_std >= 0.0)) throw ConfigError("restore.noise_std: must be >= 0");
  ImageBatch y = op.apply(x0);
  if (noise_std > 0.0) {
    for (std::size_t i = 0; i < y.count(); ++i) {
      RngStream rng(seed, 0x6d656173ull + i);
      for (auto& v : y.image(i)) v += noise_std * rng.gaussian();
    }
  }
  return y;
}

namespace {

ImageBatch residual(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                    const ImageBatch& eps, const ImageBatch& y, const MeasurementOp& op) {
  const ImageBatch x0 = predict_x0(schedule, x_t, t, eps);
  ImageBatch r = op.apply(x0);
  require_same_shape(r, y, "dps residual");
  for (std::size_t i = 0; i < r.size(); ++i) r.values()[i] -= y.values()[i];
  return r;
}

}  // namespace

ImageBatch dps_gradient(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                        const ImageBatch& eps, const ImageBatch& y, const MeasurementOp& op) {
  ImageBatch g = op.adjoint(residual(schedule, x_t, t, eps, y, op), x_t.side());
  const double coef = 2.0 / std::sqrt(schedule.alpha_bar(t));
  for (auto& v : g.values()) v *= coef;
  return g;
}

double dps_loss(const NoiseSchedule& schedule, const ImageBatch& x_t, int t,
                const ImageBatch& eps, const ImageBatch& y, const MeasurementOp& op) {
  const ImageBatch r = residual(schedule, x_t, t, eps, y, op);
  double total = 0.0;
  for (double v : r.values()) total += v * v;
  return total;
}

ImageBatch restore(const ImageBatch& y, const MeasurementOp& op, const Denoiser& model,
                   const NoiseSchedule& schedule, const RestoreConfig& config, std::uint64_t seed,
                   std::size_t threads) {
  if (!(config.eta >= 0.0) || !std::isfinite(config.eta)) {
    throw ConfigError("restore.eta: must be a finite value >= 0");
  }
  const auto side = static_cast<std::size_t>(model.config().image_side);
  op.validate(side);
  if (y.side() != op.output_side(side)) throw DimensionError("restore: measurement size mismatch");

  SampleRequest request;
  request.sampler = config.sampler;
  request.guidance = config.guidance;
  request.count = y.count();
  request.cls = -1;
  request.seed = seed;
  request.threads = threads;

  // eta is a step size on x0_hat: the gradient step is scaled by
  // sqrt(alpha_bar_t * alpha_bar_prev) / 2, which moves x0_hat of the next
  // state by -eta A^T (A x0_hat - y) when eps is held fixed.
  std::map<int, double> step_scale;
  const auto visited = sampling_timesteps(schedule, config.sampler);
  for (std::size_t i = 0; i < visited.size(); ++i) {
    const int t_prev = i + 1 < visited.size() ? visited[i + 1] : 0;
    step_scale[visited[i]] =
        0.5 * std::sqrt(schedule.alpha_bar(visited[i]) * schedule.alpha_bar_or_one(t_prev));
  }

  StepHook hook;
  if (config.eta > 0.0) {
    hook = [&](ImageBatch& x_prev, const ImageBatch& x_t, int t, const ImageBatch& eps,
               std::size_t first) {
      const ImageBatch y_part = y.slice(first, x_t.count());
      const ImageBatch g = dps_gradient(schedule, x_t, t, eps, y_part, op);
      const double step = config.eta * step_scale.at(t);
      auto& xv = x_prev.values();
      for (std::size_t i = 0; i < xv.size(); ++i) xv[i] -= step * g.values()[i];
    };
  }
  return sample_loop(model, schedule, request, hook).images;
}

}  // namespace pag
