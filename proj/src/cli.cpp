#include "pag/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "pag/inverse.hpp"

namespace pag {

namespace {

NoiseSchedule schedule_from(const RunConfig& c) {
  return make_linear_schedule(c.schedule_steps, c.beta_start, c.beta_end);
}

SampleRequest request_from(const RunConfig& c) {
  SampleRequest req;
  req.sampler = c.sampler;
  req.guidance = c.guidance;
  req.count = c.n;
  req.cls = c.cls;
  req.seed = c.seed;
  req.trace = c.trace;
  req.trace_stride = c.trace_stride;
  req.threads = c.threads;
  return req;
}

Tensor stack(const std::vector<ImageBatch>& frames) {
  Tensor t;
  if (frames.empty()) {
    t.dims = {0, 0, 0, 0};
    return t;
  }
  t.dims = {frames.size(), frames[0].count(), frames[0].side(), frames[0].side()};
  for (const auto& f : frames) t.values.insert(t.values.end(), f.values().begin(), f.values().end());
  return t;
}

std::vector<ImageBatch> unstack(const Tensor& t) {
  if (t.dims.size() != 4) throw FormatError("trace entry is not 4-dimensional");
  std::vector<ImageBatch> frames;
  const std::size_t per = t.dims[1] * t.dims[2] * t.dims[3];
  for (std::size_t s = 0; s < t.dims[0]; ++s) {
    frames.emplace_back(t.dims[1], t.dims[2],
                        std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(s * per),
                                            t.values.begin() + static_cast<std::ptrdiff_t>((s + 1) * per)));
  }
  return frames;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

TrainOutput cmd_train(const RunConfig& c, std::ostream& log) {
  const auto schedule = schedule_from(c);
  const auto data = gen_shapes(c.dataset_size, c.model.image_side, c.data_seed);
  const auto result = train(c.model, schedule, data.images, data.labels, c.train);

  TrainOutput out{c.checkpoint, c.out_dir / "loss_curve.txt", c.out_dir / "heldout.pagt"};
  save_checkpoint(result.weights, schedule, out.checkpoint);
  std::ostringstream curve;
  for (double l : result.loss_curve) curve << format_real(l) << '\n';
  const std::string text = curve.str();
  write_file(out.loss_curve, {text.begin(), text.end()});
  const auto heldout = gen_shapes(c.heldout_n, c.model.image_side, c.heldout_seed);
  save_tensor(to_tensor(heldout.images), out.heldout);

  log << "trained " << c.train.steps << " steps";
  if (!result.loss_curve.empty()) log << ", final loss " << result.loss_curve.back();
  log << "\ncheckpoint: " << out.checkpoint.string() << '\n';
  return out;
}

SampleResult cmd_sample(const RunConfig& c, std::ostream& log) {
  const auto ckpt = load_checkpoint(c.checkpoint);
  const Denoiser model(ckpt.weights);
  auto result = sample_loop(model, ckpt.schedule, request_from(c));
  export_pgm(result.images, c.out_dir / "samples.pgm", c.grid_columns);
  save_tensor(to_tensor(result.images), c.out_dir / "samples.pagt");
  if (result.trace) save_container(trace_entries(*result.trace), c.out_dir / "trace.pagc");
  log << "wrote " << result.images.count() << " samples to " << (c.out_dir / "samples.pgm").string()
      << '\n';
  return result;
}

TensorMap trace_entries(const SampleTrace& trace) {
  TensorMap e;
  Tensor steps{{trace.timesteps.size()}, {}};
  for (int t : trace.timesteps) steps.values.push_back(t);
  e.emplace_back("trace.timesteps", std::move(steps));
  e.emplace_back("trace.guided", Tensor{{}, {trace.guided ? 1.0 : 0.0}});
  e.emplace_back("trace.x_t", stack(trace.x_t));
  e.emplace_back("trace.eps", stack(trace.eps));
  e.emplace_back("trace.eps_hat", stack(trace.eps_hat));
  e.emplace_back("trace.eps_tilde", stack(trace.eps_tilde));
  e.emplace_back("trace.delta", stack(trace.delta));
  e.emplace_back("trace.x0_hat", stack(trace.x0_hat));
  return e;
}

SampleTrace trace_from_entries(const TensorMap& e) {
  SampleTrace trace;
  for (double t : find_entry(e, "trace.timesteps").values) trace.timesteps.push_back(static_cast<int>(t));
  trace.guided = find_entry(e, "trace.guided").values.at(0) != 0.0;
  trace.x_t = unstack(find_entry(e, "trace.x_t"));
  trace.eps = unstack(find_entry(e, "trace.eps"));
  trace.eps_hat = unstack(find_entry(e, "trace.eps_hat"));
  trace.eps_tilde = unstack(find_entry(e, "trace.eps_tilde"));
  trace.delta = unstack(find_entry(e, "trace.delta"));
  trace.x0_hat = unstack(find_entry(e, "trace.x0_hat"));
  return trace;
}

ImageBatch trace_panel(const SampleTrace& trace, const NoiseSchedule& schedule, std::size_t chain,
                       std::size_t* rows_out) {
  const std::size_t steps = trace.timesteps.size();
  const std::size_t rows = trace.guided ? 4 : 2;
  if (rows_out != nullptr) *rows_out = rows;
  if (steps == 0) return {};
  const std::size_t side = trace.x_t[0].side();
  ImageBatch panel(rows * steps, side);
  double delta_peak = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    for (double v : trace.delta[s].image(chain)) delta_peak = std::max(delta_peak, v);
  }
  for (std::size_t s = 0; s < steps; ++s) {
    const int t = trace.timesteps[s];
    const ImageBatch x = trace.x_t[s].slice(chain, 1);
    std::size_t row = 0;
    auto put = [&](const ImageBatch& img) { panel.assign_slice(row++ * steps + s, img); };
    put(predict_x0(schedule, x, t, trace.eps[s].slice(chain, 1)));
    if (trace.guided) put(predict_x0(schedule, x, t, trace.eps_hat[s].slice(chain, 1)));
    put(predict_x0(schedule, x, t, trace.eps_tilde[s].slice(chain, 1)));
    if (trace.guided) {
      ImageBatch d = trace.delta[s].slice(chain, 1);
      for (auto& v : d.values()) v = delta_peak > 0.0 ? 2.0 * std::min(v / delta_peak, 1.0) - 1.0 : -1.0;
      put(d);
    }
  }
  return panel;
}

SampleTrace cmd_trace(const RunConfig& c, std::ostream& log) {
  const auto ckpt = load_checkpoint(c.checkpoint);
  const Denoiser model(ckpt.weights);
  auto req = request_from(c);
  req.trace = true;
  auto result = sample_loop(model, ckpt.schedule, req);
  save_container(trace_entries(*result.trace), c.out_dir / "trace.pagc");
  for (std::size_t i = 0; i < result.images.count(); ++i) {
    const auto panel = trace_panel(*result.trace, ckpt.schedule, i);
    export_pgm(panel, c.out_dir / ("trace_chain" + std::to_string(i) + ".pgm"),
               result.trace->timesteps.size());
  }
  log << "traced " << result.trace->timesteps.size() << " steps for " << result.images.count()
      << " chains\n";
  return std::move(*result.trace);
}

std::string ablation_header() { return "perturbation\tscale\tlayers\tenergy_distance\n"; }

std::string cmd_ablate(const RunConfig& c, std::ostream& log) {
  const auto& plan = c.ablate;
  std::string table = ablation_header();
  if (!plan.perturbations.empty() && !plan.scales.empty()) {
    const auto ckpt = load_checkpoint(c.checkpoint);
    const Denoiser model(ckpt.weights);
    const auto reference =
        gen_shapes(plan.reference_n, ckpt.weights.config.image_side, plan.reference_seed).images;
    for (auto kind : plan.perturbations) {
      PerturbationSpec spec = c.guidance.perturbation;
      spec.kind = kind;
      for (double scale : plan.scales) {
        std::vector<std::vector<int>> sets = plan.layer_sets;
        if (!spec.attention_level() || sets.empty()) sets = {std::vector<int>{}};
        for (const auto& layers : sets) {
          auto req = request_from(c);
          req.trace = false;
          req.guidance.mode = GuidanceMode::pag;
          req.guidance.pag_scale = scale;
          req.guidance.perturbation = spec;
          req.guidance.perturbation.layers = layers;
          const auto images = sample_loop(model, ckpt.schedule, req).images;
          const double ed = energy_distance(images, reference);
          const std::string row = std::string(to_string(kind)) + '\t' + format_real(scale) + '\t' +
                                  (spec.attention_level() ? format_layers(layers) : "-") + '\t' +
                                  format_real(ed) + '\n';
          log << row;
          table += row;
        }
      }
    }
  }
  write_file(c.out_dir / "ablation.txt", {table.begin(), table.end()});
  return table;
}

ImageBatch cmd_restore(const RunConfig& c, std::ostream& log) {
  const auto ckpt = load_checkpoint(c.checkpoint);
  const Denoiser model(ckpt.weights);
  ImageBatch y;
  if (!c.restore_truth.empty()) {
    const auto truth = to_image_batch(load_tensor(c.restore_truth));
    y = measure(truth, c.measurement, c.restore.noise_std, c.seed);
    save_tensor(to_tensor(y), c.out_dir / "measurement.pagt");
  } else {
    if (c.restore_in.empty()) throw ConfigError("restore.in: measurement tensor required");
    y = to_image_batch(load_tensor(c.restore_in));
  }
  const auto restored = restore(y, c.measurement, model, ckpt.schedule, c.restore, c.seed, c.threads);
  save_tensor(to_tensor(restored), c.restore_out);
  const auto residual = c.measurement.apply(restored);
  double mse = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = residual.values()[i] - y.values()[i];
    mse += d * d;
  }
  log << "restored " << restored.count() << " images, measurement mse "
      << mse / static_cast<double>(std::max<std::size_t>(y.size(), 1)) << '\n';
  return restored;
}

MetricReport cmd_eval(const RunConfig& c, std::ostream& log) {
  if (c.eval_samples.empty()) throw ConfigError("eval.samples: path required");
  if (c.eval_reference.empty()) throw ConfigError("eval.reference: path required");
  const auto samples = to_image_batch(load_tensor(c.eval_samples));
  const auto reference = to_image_batch(load_tensor(c.eval_reference));
  const auto report = evaluate(samples, reference, c.eval_k, c.seed);
  const auto text = format_report(report);
  write_file(c.eval_report, {text.begin(), text.end()});
  log << text;
  return report;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Perturbed-attention guided diffusion toolkit"};
  app.require_subcommand(1);

  struct Alias {
    const char* flag;
    const char* key;
  };
  const std::vector<Alias> common = {{"--seed", "run.seed"}, {"--checkpoint", "run.checkpoint"}};
  const std::vector<Alias> sampling = {
      {"--sampler", "sampler.kind"}, {"--steps", "sampler.steps"},   {"--guidance", "guidance.mode"},
      {"--scale", "guidance.scale"}, {"--perturb", "guidance.perturb"}, {"--layers", "guidance.layers"},
      {"--n", "sampler.n"},          {"--class", "sampler.class"}};
  const std::map<std::string, std::vector<Alias>> per_command = {
      {"train", {{"--steps", "train.steps"}, {"--out", "run.out"}}},
      {"sample", {{"--out", "run.out"}}},
      {"trace", {{"--out", "run.out"}}},
      {"ablate", {{"--out", "run.out"}}},
      {"restore",
       {{"--task", "restore.task"}, {"--rect", "restore.rect"}, {"--eta", "restore.eta"},
        {"--in", "restore.in"}, {"--out", "restore.out"}, {"--truth", "restore.truth"}}},
      {"eval",
       {{"--samples", "eval.samples"}, {"--reference", "eval.reference"}, {"--report", "eval.report"},
        {"--out", "run.out"}}},
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train the denoiser on the shapes dataset"},
      {"sample", "generate a sample grid"},
      {"trace", "record and render per-step predictions"},
      {"ablate", "sweep perturbations, scales and layers"},
      {"restore", "solve a linear inverse problem"},
      {"eval", "compare a sample tensor with a reference tensor"},
  };

  struct Bound {
    std::string key;
    std::string value;
    CLI::Option* option = nullptr;
  };
  std::map<std::string, std::vector<Bound>> bound;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    subs[name] = sub;
    auto& slots = bound[name];
    std::vector<Alias> aliases = common;
    if (name != "train" && name != "eval") aliases.insert(aliases.end(), sampling.begin(), sampling.end());
    const auto& extra = per_command.at(name);
    aliases.insert(aliases.end(), extra.begin(), extra.end());
    slots.reserve(config_keys().size() + aliases.size());
    for (const auto& key : config_keys()) slots.push_back({key.name, {}, nullptr});
    for (const auto& a : aliases) slots.push_back({a.key, {}, nullptr});
    std::size_t i = 0;
    for (const auto& key : config_keys()) {
      slots[i].option = sub->add_option("--" + key.name, slots[i].value, key.help);
      ++i;
    }
    for (const auto& a : aliases) {
      slots[i].option = sub->add_option(a.flag, slots[i].value, std::string("alias for ") + a.key);
      ++i;
    }
    sub->add_option("--config", config_paths[name], "key = value config file");
  }

  std::vector<const char*> argv{"pag"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  std::string chosen;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) chosen = name;
  }

  try {
    ConfigValues file_values;
    if (!config_paths[chosen].empty()) file_values = read_config_file(config_paths[chosen]);
    ConfigValues flag_values;
    for (const auto& slot : bound[chosen]) {
      if (slot.option->count() > 0) flag_values[slot.key] = slot.value;
    }
    const RunConfig config = resolve_config(file_values, flag_values);
    if (chosen == "train") cmd_train(config, out);
    else if (chosen == "sample") cmd_sample(config, out);
    else if (chosen == "trace") cmd_trace(config, out);
    else if (chosen == "ablate") cmd_ablate(config, out);
    else if (chosen == "restore") cmd_restore(config, out);
    else if (chosen == "eval") cmd_eval(config, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace pag
