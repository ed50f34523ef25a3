/* Copyright 2026 The pfcv Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// pfcv command-line entry point.
//
// Exit codes: 0 success, 1 gradient check violation, 2 configuration or
// input error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "pfcv/pfcv.hpp"

namespace {

using namespace pfcv;

constexpr int kExitOk = 0;
constexpr int kExitViolation = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void echo_config(const std::string& cmd, const KeyValues& kv) {
  std::cerr << "[" << cmd << "] resolved config\n";
  for (const auto& [k, v] : kv) std::cerr << "  " << k << " = " << v << "\n";
}

void merge_into(KeyValues& dst, const KeyValues& src, const std::string& prefix = "") {
  for (const auto& [k, v] : src) dst[prefix + k] = v;
}

std::vector<std::size_t> parse_counts(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& s : detail::split(text, ',')) {
    const long long v = detail::parse_int("counts", s);
    if (v <= 0) throw InvalidArgument("counts: must be positive");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw InvalidArgument("counts: empty list");
  return out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string data = "synthetic:4class";
  std::string out;
  std::optional<std::uint64_t> seed;
};

int gen_data(const GenDataArgs& a) {
  DataSource src = parse_data_source(a.data);
  if (!src.synthetic) throw InvalidArgument("data: gen-data needs a synthetic source");
  if (a.seed) src.spec.seed = *a.seed;
  KeyValues kv = src.to_key_values();
  kv["out"] = a.out;
  echo_config("gen-data", kv);
  const Dataset d = load_dataset(src, Task::classify);
  save_dataset(d, a.out, src.spec.part_labels());
  std::cerr << "wrote " << d.train.size() << " train and " << d.test.size() << " test clouds to "
            << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data = "synthetic:4class";
  std::string kernel, task, config, out, metrics;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
};

int train(const TrainArgs& a) {
  ModelConfig mc;
  TrainConfig tc;
  std::string text;
  if (!a.config.empty()) {
    try {
      text = read_file(a.config);
    } catch (const std::exception& e) {
      throw InvalidArgument(std::string("config: ") + e.what());
    }
  }
  for (const auto& s : a.set) text += "\n" + s;
  apply_config_text(text, mc, tc);
  if (!a.kernel.empty()) mc.kernel = parse_family(a.kernel);
  if (!a.task.empty()) mc.task = parse_task(a.task);
  if (a.seed) mc.seed = tc.seed = *a.seed;

  const DataSource src = parse_data_source(a.data);
  const Dataset data = load_dataset(src, mc.task);
  mc.classes = data.classes;
  mc.validate();
  tc.validate();
  const std::string metrics = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;

  KeyValues kv;
  merge_into(kv, mc.to_key_values(), "model.");
  merge_into(kv, tc.to_key_values(), "train.");
  merge_into(kv, src.to_key_values());
  kv["out"] = a.out;
  kv["metrics"] = metrics;
  echo_config("train", kv);

  auto model = build_model<float>(mc);
  const auto log = train_loop(*model, data, tc, [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " " << e.split << " loss " << fixed(e.metrics.loss, 4)
              << " oa " << fixed(e.metrics.oa, 4) << " miou " << fixed(e.metrics.miou, 4) << "\n";
  });
  save_checkpoint(*model, a.out);
  atomic_write(metrics, metrics_csv(log));
  std::cerr << "wrote " << a.out << " and " << metrics << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data = "synthetic:4class";
  std::size_t points = 0;
  std::string out;
};

int eval(const EvalArgs& a) {
  auto model = load_checkpoint<float>(a.ckpt);
  const DataSource src = parse_data_source(a.data);
  Dataset data = load_dataset(src, model->config().task);
  if (data.test.empty()) throw InvalidArgument("data: test split is empty");
  KeyValues kv;
  merge_into(kv, model->config().to_key_values(), "model.");
  merge_into(kv, src.to_key_values());
  kv["ckpt"] = a.ckpt;
  kv["points"] = a.points ? std::to_string(a.points) : "all";
  echo_config("eval", kv);
  const auto clouds = a.points ? downsample_all(data.test, a.points) : data.test;
  const Metrics m = evaluate(*model, clouds);
  std::cerr << "test loss " << fixed(m.loss, 4) << " oa " << fixed(m.oa, 4) << " macc "
            << fixed(m.macc, 4) << " miou " << fixed(m.miou, 4) << "\n";
  if (!a.out.empty()) atomic_write(a.out, metrics_csv({{0, "test", m}}));
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string kernel = "all";
  int trials = 10;
  double tolerance = 1e-5;
  std::uint64_t seed = 1;
  std::string sabotage;
};

int gradcheck(const GradcheckArgs& a) {
  if (a.trials < 1) throw InvalidArgument("trials: must be at least 1");
  if (!(a.tolerance > 0.0)) throw InvalidArgument("tolerance: must be positive");
  std::vector<KernelFamily> families;
  if (a.kernel == "all")
    families.assign(std::begin(kAllFamilies), std::end(kAllFamilies));
  else
    families.push_back(parse_family(a.kernel));
  echo_config("gradcheck", {{"kernel", a.kernel},
                            {"trials", std::to_string(a.trials)},
                            {"tolerance", detail::fmt(a.tolerance)},
                            {"seed", std::to_string(a.seed)}});
  GradcheckOptions opt;
  opt.trials = a.trials;
  opt.seed = a.seed;
  opt.sabotage = a.sabotage;
  bool ok = true;
  for (auto f : families) {
    const auto report = gradcheck_family(f, opt);
    std::cerr << "== " << to_string(f) << " (max relative error " << report.worst() << ")\n";
    report.print(std::cerr, a.tolerance);
    for (const auto& g : report.violations(a.tolerance)) {
      std::cerr << "violation: " << to_string(f) << " " << g << "\n";
      ok = false;
    }
  }
  std::cerr << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? kExitOk : kExitViolation;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string ckpt_dir;
  std::string families = "potential_quadratic,discrete,continuous";
  std::string counts = "64,128,256,512,1024";
  std::string data = "synthetic:4class,n_points=1024";
  std::string out;
};

int sparse_sweep_cmd(const SweepArgs& a) {
  const auto counts = parse_counts(a.counts);
  const DataSource src = parse_data_source(a.data);
  KeyValues kv = src.to_key_values();
  kv["ckpt_dir"] = a.ckpt_dir;
  kv["families"] = a.families;
  kv["counts"] = a.counts;
  kv["out"] = a.out;
  echo_config("sparse-sweep", kv);

  std::vector<std::unique_ptr<Model<float>>> owned;
  std::vector<std::pair<std::string, Model<float>*>> models;
  for (const auto& name : detail::split(a.families, ',')) {
    parse_family(name);
    const auto path = std::filesystem::path(a.ckpt_dir) / (name + ".ckpt");
    if (!std::filesystem::exists(path))
      throw InvalidArgument("missing checkpoint for " + name + ": " + path.string());
    owned.push_back(load_checkpoint<float>(path));
    models.emplace_back(name, owned.back().get());
  }
  const Dataset data = load_dataset(src, Task::classify);
  const auto rows = sparse_sweep<float>(models, data.test, counts);
  atomic_write(a.out, sweep_csv(rows));

  std::cerr << "\nOA (%) by input point count\n" << std::string(24, ' ');
  for (auto n : counts) std::cerr << std::string(8 - std::min<std::size_t>(8, std::to_string(n).size()), ' ') << n;
  std::cerr << "\n";
  std::map<std::string, double> at_min;
  const std::size_t min_count = *std::min_element(counts.begin(), counts.end());
  for (const auto& [name, m] : models) {
    std::string line = name;
    line.resize(24, ' ');
    for (const auto& r : rows)
      if (r.family == name) {
        const std::string v = fixed(100.0 * r.oa, 1);
        line += std::string(8 - std::min<std::size_t>(8, v.size()), ' ') + v;
        if (r.points == min_count) at_min[name] = r.oa;
      }
    std::cerr << line << "\n";
  }
  auto find = [&](const std::string& prefix) -> std::optional<double> {
    for (const auto& [k, v] : at_min)
      if (k.rfind(prefix, 0) == 0) return v;
    return std::nullopt;
  };
  const auto pot = find("potential_"), con = find("continuous"), dis = find("discrete");
  if (pot && con && dis) {
    const bool pass = *pot >= *con && *con >= *dis;
    std::cerr << "ordering at " << min_count << " points (potential >= continuous >= discrete): "
              << (pass ? "PASS" : "FAIL") << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct VizArgs {
  std::string ckpt;
  int layer = 0;
  std::string mode = "argmax";
  double eta = 0.5;
  double band = 0.02;
  int grid = 48;
  std::vector<int> fields;
  std::size_t probe = 4096;
  std::uint64_t seed = 0;
  std::string out;
};

int viz_fields(const VizArgs& a) {
  auto model = load_checkpoint<float>(a.ckpt);
  const auto& cfg = model->config();
  if (a.layer < 0 || static_cast<std::size_t>(a.layer) >= model->blocks().size())
    throw InvalidArgument("layer: index " + std::to_string(a.layer) + " out of range [0, " +
                          std::to_string(model->blocks().size()) + ")");
  const auto* bank = model->blocks()[static_cast<std::size_t>(a.layer)].conv->field_bank();
  if (bank == nullptr)
    throw InvalidArgument(std::string("kernel: ") + to_string(cfg.kernel) + " has no potential fields");
  const double r = cfg.radii[static_cast<std::size_t>(a.layer)];
  echo_config("viz-fields", {{"ckpt", a.ckpt},
                             {"layer", std::to_string(a.layer)},
                             {"mode", a.mode},
                             {"eta", detail::fmt(a.eta)},
                             {"band", detail::fmt(a.band)},
                             {"grid", std::to_string(a.grid)},
                             {"fields", a.fields.empty() ? "all" : detail::join(a.fields)},
                             {"probe", std::to_string(a.probe)},
                             {"seed", std::to_string(a.seed)},
                             {"radius", detail::fmt(r)},
                             {"out", a.out}});
  if (a.mode == "argmax") {
    const std::vector<Eigen::Index> fields(a.fields.begin(), a.fields.end());
    const auto cp = color_by_argmax(fields.empty() ? *bank : select_fields<float>(*bank, fields),
                                    probe_ball(a.probe, r, a.seed));
    atomic_write(a.out, write_ply_colored(cp.points, cp.colors));
    std::cerr << "wrote " << cp.points.size() << " colored points, 8-neighbor color agreement "
              << fixed(color_coherence(cp), 3) << "\n";
  } else if (a.mode == "isosurface") {
    IsosurfaceOptions opt;
    opt.eta = a.eta;
    opt.band = a.band;
    opt.grid = a.grid;
    opt.fields.assign(a.fields.begin(), a.fields.end());
    const auto pts = isosurface_points(*bank, r, opt);
    const std::vector<Rgb> gray(pts.size(), kGray);
    atomic_write(a.out, write_ply_colored(pts, gray));
    std::cerr << "wrote " << pts.size() << " isosurface points\n";
  } else {
    throw InvalidArgument("mode: expected argmax or isosurface");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point convolutions with learned potential fields"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic dataset directory");
  c_gen->add_option("--data", gd.data, "synthetic:4class[,key=value...]")->capture_default_str();
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--seed", gd.seed, "Data seed");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  c_train->add_option("--data", tr.data, "Dataset directory or synthetic spec")->capture_default_str();
  c_train->add_option("--kernel", tr.kernel, "Kernel family");
  c_train->add_option("--task", tr.task, "classify or segment");
  c_train->add_option("--config", tr.config, "key = value config file");
  c_train->add_option("--set", tr.set, "Extra key=value overrides");
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--metrics", tr.metrics, "Metrics CSV path (default <out>.metrics.csv)");
  c_train->add_option("--seed", tr.seed, "Model and training seed");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  c_eval->add_option("--data", ev.data, "Dataset directory or synthetic spec")->capture_default_str();
  c_eval->add_option("--points", ev.points, "Downsample test clouds to this many points");
  c_eval->add_option("--out", ev.out, "Metrics CSV path");

  GradcheckArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  c_grad->add_option("--kernel", gc.kernel, "Kernel family or 'all'")->capture_default_str();
  c_grad->add_option("--trials", gc.trials, "Random trials per family")->capture_default_str();
  c_grad->add_option("--tolerance", gc.tolerance, "Max relative error")->capture_default_str();
  c_grad->add_option("--seed", gc.seed, "Base seed")->capture_default_str();
  c_grad->add_option("--sabotage", gc.sabotage)->group("");

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sparse-sweep", "Evaluate checkpoints at reduced point counts");
  c_sweep->add_option("--ckpt-dir", sw.ckpt_dir, "Directory with <family>.ckpt files")->required();
  c_sweep->add_option("--families", sw.families, "Comma-separated families")->capture_default_str();
  c_sweep->add_option("--counts", sw.counts, "Comma-separated point counts")->capture_default_str();
  c_sweep->add_option("--data", sw.data, "Test data source")->capture_default_str();
  c_sweep->add_option("--out", sw.out, "CSV path")->required();

  VizArgs vz;
  auto* c_viz = app.add_subcommand("viz-fields", "Export potential-field visualizations as PLY");
  c_viz->add_option("--ckpt", vz.ckpt, "Checkpoint path")->required();
  c_viz->add_option("--layer", vz.layer, "Block index")->capture_default_str();
  c_viz->add_option("--mode", vz.mode, "argmax or isosurface")->capture_default_str();
  c_viz->add_option("--eta", vz.eta, "Isosurface level")->capture_default_str();
  c_viz->add_option("--band", vz.band, "Isosurface half-width")->capture_default_str();
  c_viz->add_option("--grid", vz.grid, "Isosurface grid samples per axis")->capture_default_str();
  c_viz->add_option("--field", vz.fields, "Field indices (default all)");
  c_viz->add_option("--probe", vz.probe, "Probe points for argmax mode")->capture_default_str();
  c_viz->add_option("--seed", vz.seed, "Probe seed")->capture_default_str();
  c_viz->add_option("--out", vz.out, "PLY path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*c_gen) return gen_data(gd);
    if (*c_train) return train(tr);
    if (*c_eval) return eval(ev);
    if (*c_grad) return gradcheck(gc);
    if (*c_sweep) return sparse_sweep_cmd(sw);
    if (*c_viz) return viz_fields(vz);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
