// Copyright 2026 The Balance Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "balance/commands.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "balance/errors.h"

namespace balance {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

Json vec_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vec json_vec(const Json& j) {
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed for " + path);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Json stats_json(const std::vector<JointStats>& s) {
  Json a = Json::array();
  for (const auto& j : s) a.push_back(Json{{"mean", j.mean}, {"stddev", j.stddev}, {"max", j.max}});
  return a;
}

// Runs `job(i)` for i in [0, count) on up to `threads` workers; the first
// exception is rethrown after all jobs finish.
template <typename Job>
void parallel_for(int count, int threads, Job job) {
  const int workers = std::max(1, std::min(threads, count));
  for (int start = 0; start < count; start += workers) {
    std::vector<std::future<void>> jobs;
    for (int i = start; i < std::min(count, start + workers); ++i) {
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, job, i));
    }
    std::exception_ptr first;
    for (auto& j : jobs) {
      try {
        j.get();
      } catch (...) {
        if (!first) first = std::current_exception();
      }
    }
    if (first) std::rethrow_exception(first);
  }
}

template <typename Fn>
int guarded(std::ostream& err, Fn fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace

int toolkit_threads() {
  if (const char* env = std::getenv("TOOLKIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// Dataset

Dataset collect_dataset(const ExperimentConfig& config) {
  const auto plant = make_plant(config);
  ExcitationSpec spec = config.excitation;
  spec.target_samples = config.gp.N;
  spec.seed = config.seed;
  const ExcitationData ex = run_excitation(*plant, spec);
  Dataset d;
  d.config_name = config.name;
  d.robot = config.robot;
  d.nominal = config.nominal;
  d.seed = config.seed;
  d.input_spec = config.gp.input_spec;
  d.n = config.n();
  d.m = config.m();
  d.collected = ex.collected;
  d.episodes = ex.episodes;
  d.states = ex.states;
  d.controls = ex.controls;
  d.samples = residual_targets(make_nominal(config), d.input_spec, d.states, d.controls);
  return d;
}

std::string dataset_to_json(const Dataset& d) {
  Json j;
  j["format"] = "balance-dataset";
  j["version"] = kToolkitVersion;
  j["config"] = d.config_name;
  j["robot"] = to_string(d.robot);
  j["nominal"] = to_string(d.nominal);
  j["seed"] = d.seed;
  j["input_spec"] = d.input_spec.to_string();
  j["n"] = d.n;
  j["m"] = d.m;
  j["collected"] = d.collected;
  j["episodes"] = d.episodes;
  Json rows = Json::array();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    rows.push_back(Json{{"q", vec_json(d.states[i].q)},
                        {"qdot", vec_json(d.states[i].qdot)},
                        {"qddot", vec_json(*d.states[i].qddot)},
                        {"u", vec_json(d.controls[i])},
                        {"x", vec_json(d.samples[i].x)},
                        {"target_a", vec_json(d.samples[i].target_a)},
                        {"target_u", vec_json(d.samples[i].target_u)}});
  }
  j["rows"] = rows;
  return j.dump(1) + "\n";
}

Dataset dataset_from_json(const std::string& text) {
  Dataset d;
  try {
    const Json j = Json::parse(text);
    if (j.at("format").get<std::string>() != "balance-dataset") throw Error("not a dataset file");
    d.config_name = j.at("config").get<std::string>();
    d.robot = j.at("robot").get<std::string>() == "leg3" ? RobotKind::kLeg3 : RobotKind::kFuruta;
    const std::string nom = j.at("nominal").get<std::string>();
    d.nominal = nom == "s_n1"          ? NominalKind::kFurutaS1
                : nom == "s_n2"        ? NominalKind::kFurutaS2
                : nom == "leg-default" ? NominalKind::kLegDefault
                                       : NominalKind::kCustom;
    d.seed = j.at("seed").get<std::uint64_t>();
    d.input_spec = InputSpec::parse(j.at("input_spec").get<std::string>());
    d.n = j.at("n").get<int>();
    d.m = j.at("m").get<int>();
    d.collected = j.at("collected").get<int>();
    d.episodes = j.at("episodes").get<int>();
    const int dim = d.input_spec.input_dim(d.n + d.m);
    for (const auto& r : j.at("rows")) {
      JointState s(json_vec(r.at("q")), json_vec(r.at("qdot")), json_vec(r.at("qddot")));
      s.validate(d.n + d.m);
      ResidualSample rs{json_vec(r.at("x")), json_vec(r.at("target_a")), json_vec(r.at("target_u"))};
      if (rs.x.size() != dim || rs.target_a.size() != d.n || rs.target_u.size() != d.m) {
        throw DimensionError("dataset row has the wrong shape");
      }
      d.states.push_back(std::move(s));
      d.controls.push_back(json_vec(r.at("u")));
      d.samples.push_back(std::move(rs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed dataset: ") + e.what());
  }
  if (d.samples.size() < 2) throw Error("dataset holds fewer than two rows");
  return d;
}

void write_dataset(const std::string& path, const Dataset& data) { write_file(path, dataset_to_json(data)); }

Dataset read_dataset(const std::string& path) { return dataset_from_json(read_file(path)); }

// ---------------------------------------------------------------------------
// Training

TrainedModels train_models(const Dataset& data, const GpSettings& gp, std::uint64_t seed, int threads) {
  TrainOptions opts = gp.optimizer;
  opts.seed = seed;
  const int dof = data.n + data.m;
  ResidualModels rm = train_residual_models(data.samples, data.input_spec, dof, opts, threads);
  TrainedModels out;
  out.a = rm.a;
  out.u = rm.u;

  // Hold-out check: every fifth row, hyperparameters kept.
  std::vector<Eigen::Index> fit_rows;
  std::vector<Eigen::Index> test_rows;
  for (int i = 0; i < data.rows(); ++i) (i % 5 == 4 ? test_rows : fit_rows).push_back(i);
  const BoundConstants ba = compute_bound(out.a, gp.eta);
  const BoundConstants bu = compute_bound(out.u, gp.eta);
  int report_index = 0;
  for (const auto* group : {&out.a, &out.u}) {
    const bool is_a = group == &out.a;
    const BoundConstants& b = is_a ? ba : bu;
    for (int c = 0; c < group->outputs(); ++c, ++report_index) {
      const GpChannel& ch = group->channels()[c];
      ChannelSummary s;
      s.group = is_a ? "a" : "u";
      s.index = c;
      s.nlml_before = rm.reports[report_index].nlml_init;
      s.nlml_after = rm.reports[report_index].nlml_final;
      s.iterations = rm.reports[report_index].iterations;
      s.kappa = b.kappa(c);
      s.varsigma = b.varsigma(c);
      s.sigma_max = std::sqrt(ch.hyper().sigma_f * ch.hyper().sigma_f + ch.hyper().vartheta * ch.hyper().vartheta);
      if (!test_rows.empty()) {
        Mat X(static_cast<Eigen::Index>(fit_rows.size()), ch.X().cols());
        Vec Y(static_cast<Eigen::Index>(fit_rows.size()));
        for (std::size_t i = 0; i < fit_rows.size(); ++i) {
          X.row(static_cast<Eigen::Index>(i)) = ch.X().row(fit_rows[i]);
          Y(static_cast<Eigen::Index>(i)) = ch.Y()(fit_rows[i]);
        }
        const GpChannel sub = GpChannel::fit(X, Y, ch.hyper());
        double se = 0.0;
        for (Eigen::Index r : test_rows) {
          const double e = sub.mean(ch.X().row(r).transpose()) - ch.Y()(r);
          se += e * e;
        }
        s.holdout_rmse = std::sqrt(se / static_cast<double>(test_rows.size()));
      }
      out.channels.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

std::shared_ptr<const GpDynamics> make_gp_dynamics(const ExperimentConfig& config, const GpVectorModel& a,
                                                   const GpVectorModel& u) {
  if (a.outputs() != config.n() || u.outputs() != config.m() || a.dof() != config.dof()) {
    throw ConfigError("model", "GP model shape does not match the configured robot");
  }
  if (a.input_spec().to_string() != config.gp.input_spec.to_string()) {
    throw ConfigError("gp.input_spec", "model was trained on '" + a.input_spec().to_string() +
                                           "', config says '" + config.gp.input_spec.to_string() + "'");
  }
  return std::make_shared<GpDynamics>(make_nominal(config), std::make_shared<GpVectorModel>(a),
                                      std::make_shared<GpVectorModel>(u), config.gp.accel_policy);
}

std::unique_ptr<Controller> make_controller(const ExperimentConfig& config, std::shared_ptr<const GpDynamics> gp) {
  const double dt = 1.0 / config.control_hz;
  switch (config.controller) {
    case ControllerKind::kEicModel: {
      std::shared_ptr<const DynamicsSource> model = make_controller_model(config);
      return std::make_unique<EicController>(model, config.outer, config.inner, dt, BemOptions{},
                                             config.bem_cutoff_hz);
    }
    case ControllerKind::kEicGp:
      if (!gp) throw ConfigError("model", "eic-gp needs a trained model (--model)");
      return std::make_unique<EicController>(gp, config.outer, config.inner, dt, BemOptions{},
                                             config.bem_cutoff_hz);
    case ControllerKind::kPeicGp:
      if (!gp) throw ConfigError("model", "peic-gp needs a trained model (--model)");
      return std::make_unique<PeicController>(gp, make_partition(config), config.outer, config.inner, dt,
                                              BemOptions{}, config.bem_cutoff_hz, config.condition_limit);
  }
  throw ConfigError("controller", "unsupported");
}

BoundReport evaluate_bound(const ExperimentConfig& config, const GpDynamics& gp, const SimTrace& run) {
  const auto plant = make_plant(config);
  const NominalModel nominal = make_nominal(config);
  const Partition partition = make_partition(config);
  BoundReport rep;
  ErrorBoundParams& p = rep.params;
  p.sigma_max_a = variance_sup(gp.gp_a());
  p.sigma_max_u = variance_sup(gp.gp_u());
  p.kappa_a = compute_bound(gp.gp_a(), config.gp.eta).kappa;
  p.kappa_u = compute_bound(gp.gp_u(), config.gp.eta).kappa;
  p.eta = config.gp.eta * config.gp.eta;
  const double sigma_max = std::max(p.sigma_max_a, p.sigma_max_u);

  const bool fit = !(config.bound.c1 && config.bound.c2 && config.bound.c3 && config.bound.c4);
  SimTrace calibration;
  if (fit) {
    auto shared = std::shared_ptr<const GpDynamics>(std::shared_ptr<const GpDynamics>{}, &gp);
    auto controller = make_controller(config, shared);
    JointState init = make_initial_state(config);
    init.q.tail(config.m()).array() += config.bound.calibration_offset;
    SimOptions so = make_sim_options(config);
    so.true_bem = true;
    calibration = run_closed_loop(*plant, *controller, make_reference(config), init, so);
    rep.calibration_diverged = calibration.diverged;
  }
  const SimTrace& region_source = fit ? calibration : run;
  sample_block_bounds(nominal, partition, visited_region(region_source), p);
  if (fit) {
    const BoundSweep unconstrained = sweep_error_bound(p, config.outer, config.inner, config.n(),
                                                       config.m(), sigma_max, config.bound.sweep_points);
    const double d2_max = unconstrained.p_norm > 0.0 ? 0.25 / unconstrained.p_norm : 0.0;
    p = calibrate_bound(calibration, p, config.bound.transient, d2_max);
  }
  if (config.bound.c1) p.c1 = *config.bound.c1;
  if (config.bound.c2) p.c2 = *config.bound.c2;
  if (config.bound.c3) p.c3 = *config.bound.c3;
  if (config.bound.c4) p.c4 = *config.bound.c4;
  rep.sweep = sweep_error_bound(p, config.outer, config.inner, config.n(), config.m(), sigma_max,
                                config.bound.sweep_points);
  const std::vector<double> norms = error_norms(run);
  for (std::size_t r = 0; r < run.size(); ++r) {
    if (run.t[r] <= config.bound.transient) continue;
    ++rep.checked;
    rep.inside += norms[r] <= rep.sweep.radius ? 1 : 0;
    rep.max_norm = std::max(rep.max_norm, norms[r]);
  }
  return rep;
}

RunResult run_scenario(const ExperimentConfig& config,
                       const std::optional<std::pair<GpVectorModel, GpVectorModel>>& models) {
  config.validate();
  std::shared_ptr<const GpDynamics> gp;
  if (config.uses_gp()) {
    if (!models) throw ConfigError("model", to_string(config.controller) + " needs a trained model (--model)");
    gp = make_gp_dynamics(config, models->first, models->second);
  }
  const auto plant = make_plant(config);
  auto controller = make_controller(config, gp);
  RunResult res;
  res.trace = run_closed_loop(*plant, *controller, make_reference(config), make_initial_state(config),
                              make_sim_options(config));
  const double window = std::min(2.0, config.duration / 2.0);
  if (!res.trace.t.empty() && res.trace.t.back() >= window) {
    res.stats = error_stats(res.trace, window, false);
    res.stats_true = error_stats(res.trace, window, true);
  }
  if (config.controller == ControllerKind::kPeicGp && !res.trace.diverged) {
    res.bound = evaluate_bound(config, *gp, res.trace);
  }
  return res;
}

std::string summary_line(const ExperimentConfig& config, const RunResult& r) {
  std::string s = config.name + "  " + to_string(config.controller) + "  ";
  s += r.trace.diverged ? "diverged at t=" + fmt("%.2f", r.trace.diverged_time) + " s (" + r.trace.message + ")"
                        : "completed";
  if (r.stats.rows > 0) {
    for (std::size_t i = 0; i < r.stats.e_a.size(); ++i) {
      s += "  |e_a" + std::to_string(i + 1) + "| " + fmt("%.4f", r.stats.e_a[i].mean) + " +- " +
           fmt("%.4f", r.stats.e_a[i].stddev);
    }
    for (std::size_t i = 0; i < r.stats.e_u.size(); ++i) {
      s += "  |e_u" + std::to_string(i + 1) + "| " + fmt("%.4f", r.stats.e_u[i].mean) + " +- " +
           fmt("%.4f", r.stats.e_u[i].stddev);
    }
  }
  return s;
}

void write_run(const std::string& dir, const ExperimentConfig& config, const RunResult& r,
               const std::string& model_path) {
  fs::create_directories(dir);
  write_file(dir + "/config.json", serialize_config(config));
  Json manifest;
  manifest["toolkit"] = "balance";
  manifest["version"] = kToolkitVersion;
  manifest["command"] = "simulate";
  manifest["name"] = config.name;
  manifest["seed"] = config.seed;
  manifest["model"] = model_path.empty() ? Json(nullptr) : Json("model.json");
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  if (!model_path.empty()) {
    const fs::path dst = fs::path(dir) / "model.json";
    if (!fs::exists(dst) || !fs::equivalent(model_path, dst)) {
      fs::copy_file(model_path, dst, fs::copy_options::overwrite_existing);
    }
  }
  r.trace.write_csv(dir + "/trace.csv");

  Json stats;
  stats["name"] = config.name;
  stats["robot"] = to_string(config.robot);
  stats["controller"] = to_string(config.controller);
  stats["nominal"] = to_string(config.nominal);
  stats["status"] = r.trace.diverged ? "diverged" : "completed";
  stats["diverged"] = r.trace.diverged;
  stats["diverged_time"] = r.trace.diverged ? Json(r.trace.diverged_time) : Json(nullptr);
  stats["bem_failed"] = r.trace.bem_failed;
  stats["controller_failed"] = r.trace.controller_failed;
  stats["message"] = r.trace.message;
  stats["rows"] = r.trace.size();
  stats["true_bem_failures"] = r.trace.true_bem_failures;
  stats["window_start"] = r.stats.window_start;
  stats["window_rows"] = r.stats.rows;
  stats["e_a"] = stats_json(r.stats.e_a);
  stats["e_u"] = stats_json(r.stats.e_u);
  stats["e_u_true"] = stats_json(r.stats_true.e_u);
  write_file(dir + "/stats.json", stats.dump(2) + "\n");

  std::string plane = "t [s],norm_e_q [rad],norm_edot_q [rad/s],radius\n";
  const auto pts = error_plane(r.trace);
  const double radius = r.bound ? r.bound->sweep.radius : std::nan("");
  char buf[128];
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", r.trace.t[i], pts[i].first, pts[i].second, radius);
    plane += buf;
  }
  write_file(dir + "/error_plane.csv", plane);

  if (r.bound) {
    const BoundReport& b = *r.bound;
    const ErrorBoundParams& p = b.params;
    Json bj;
    bj["c"] = Json::array({p.c1, p.c2, p.c3, p.c4});
    bj["fitted"] = !(config.bound.c1 && config.bound.c2 && config.bound.c3 && config.bound.c4);
    bj["calibration_diverged"] = b.calibration_diverged;
    bj["d_a"] = Json::array({p.d_a1, p.d_a2});
    bj["d_u"] = Json::array({p.d_u1, p.d_u2});
    bj["sigma1"] = p.sigma1;
    bj["sigma_m"] = p.sigma_m;
    bj["sigma_max"] = Json::array({p.sigma_max_a, p.sigma_max_u});
    bj["kappa_a"] = vec_json(p.kappa_a);
    bj["kappa_u"] = vec_json(p.kappa_u);
    bj["d1"] = p.d1();
    bj["d2"] = p.d2();
    bj["l_a"] = p.l_a();
    bj["l_u"] = p.l_u();
    bj["eta"] = p.eta;
    bj["hurwitz"] = b.sweep.hurwitz;
    bj["max_real_eigenvalue"] = b.sweep.max_real_eigenvalue;
    bj["p_norm"] = b.sweep.p_norm;
    bj["radius"] = std::isfinite(b.sweep.radius) ? Json(b.sweep.radius) : Json("inf");
    bj["transient"] = config.bound.transient;
    bj["checked"] = b.checked;
    bj["inside"] = b.inside;
    bj["max_norm"] = b.max_norm;
    write_file(dir + "/bound.json", bj.dump(2) + "\n");
  }
  write_file(dir + "/summary.txt", summary_line(config, r) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

ExperimentConfig resolve_config(const std::string& spec, const std::optional<std::uint64_t>& seed) {
  ExperimentConfig c;
  if (fs::exists(spec)) {
    c = load_config(spec);
  } else {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), spec) == names.end()) {
      throw ConfigError("--config", "'" + spec + "' is neither a file nor a preset");
    }
    c = preset(spec);
  }
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

int cmd_preset(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.inputs.empty()) {
      for (const auto& n : preset_names()) out << n << "\n";
      return kExitOk;
    }
    for (const auto& name : opts.inputs) {
      ExperimentConfig c = preset(name);
      if (opts.seed) c.seed = *opts.seed;
      if (opts.out.empty()) out << serialize_config(c);
      else write_file(opts.out, serialize_config(c));
    }
    return kExitOk;
  });
}

int cmd_collect(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.configs.size() != 1) throw ConfigError("--config", "collect takes exactly one config");
    const ExperimentConfig c = resolve_config(opts.configs[0], opts.seed);
    const Dataset d = collect_dataset(c);
    const std::string path = opts.out.empty() ? c.output + "/" + c.name + "/dataset.json" : opts.out;
    write_dataset(path, d);
    if (!opts.quiet) {
      out << "collected " << d.collected << " rows in " << d.episodes << " episodes, kept " << d.rows()
          << " -> " << path << "\n";
    }
    return kExitOk;
  });
}

int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.inputs.size() != 1) throw ConfigError("dataset", "train takes one dataset path");
    const Dataset d = read_dataset(opts.inputs[0]);
    GpSettings gp;
    std::uint64_t seed = d.seed;
    std::string default_out = fs::path(opts.inputs[0]).replace_filename("model.json").string();
    if (!opts.configs.empty()) {
      const ExperimentConfig c = resolve_config(opts.configs[0], opts.seed);
      gp = c.gp;
      seed = c.seed;
    } else if (opts.seed) {
      seed = *opts.seed;
    }
    const TrainedModels tm = train_models(d, gp, seed, toolkit_threads());
    const std::string path = opts.out.empty() ? default_out : opts.out;
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    save_model(path, tm.a, tm.u);
    if (!opts.quiet) {
      char buf[256];
      out << "channel   nlml_before   nlml_after  iters     kappa  varsigma  sigma_max  holdout_rmse\n";
      for (const auto& s : tm.channels) {
        std::snprintf(buf, sizeof(buf), "%s%-7d %12.4f %12.4f %6d %9.3f %9.4f %10.4f %13.6f\n",
                      s.group.c_str(), s.index + 1, s.nlml_before, s.nlml_after, s.iterations, s.kappa,
                      s.varsigma, s.sigma_max, s.holdout_rmse);
        out << buf;
      }
      out << "model -> " << path << "\n";
    }
    return kExitOk;
  });
}

int cmd_check(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.configs.size() != 1) throw ConfigError("--config", "check takes exactly one config");
    const ExperimentConfig c = resolve_config(opts.configs[0], opts.seed);
    const NominalModel nominal = make_nominal(c);
    const ConditionReport r = check_conditions(nominal, make_partition(c), SampleRegion::around_upright(c.dof()));
    const bool needs_all = c.controller == ControllerKind::kPeicGp;
    const bool ok = needs_all ? r.all() : (r.c1 && r.c2);
    auto verdict = [](bool pass, bool autop) { return std::string(pass ? "pass" : "FAIL") + (autop ? " (auto)" : ""); };
    if (!opts.quiet) {
      out << "nominal " << to_string(c.nominal) << " on " << to_string(c.robot) << ", " << r.samples
          << " samples\n";
      out << "C1 " << verdict(r.c1, false) << "  eig [" << r.min_eigenvalue << ", " << r.max_eigenvalue
          << "]  d " << r.d << "  h " << r.h << "  asym " << r.max_asymmetry << "\n";
      out << "C2 " << verdict(r.c2, false) << "  rank D_aa " << r.rank_daa << "  D_uu " << r.rank_duu
          << "  D_ua " << r.rank_dua << "\n";
      out << "C3 " << verdict(r.c3, r.c3_auto) << "  max kernel angle " << r.max_kernel_angle << " rad\n";
      out << "C4 " << verdict(r.c4, r.c4_auto) << "  worst cond(D_ua^u) " << r.worst_condition << "\n";
      out << "required for " << to_string(c.controller) << ": " << (needs_all ? "C1-C4" : "C1-C2") << " -> "
          << (ok ? "ok" : "not satisfied") << "\n";
    }
    Json j;
    j["nominal"] = to_string(c.nominal);
    j["robot"] = to_string(c.robot);
    j["samples"] = r.samples;
    j["C1"] = Json{{"pass", r.c1}, {"min_eigenvalue", r.min_eigenvalue}, {"max_eigenvalue", r.max_eigenvalue},
                   {"d", r.d}, {"h", r.h}, {"max_asymmetry", r.max_asymmetry}};
    j["C2"] = Json{{"pass", r.c2}, {"rank_daa", r.rank_daa}, {"rank_duu", r.rank_duu}, {"rank_dua", r.rank_dua}};
    j["C3"] = Json{{"pass", r.c3}, {"auto", r.c3_auto}, {"max_kernel_angle", r.max_kernel_angle}};
    j["C4"] = Json{{"pass", r.c4}, {"auto", r.c4_auto}, {"worst_condition", r.worst_condition}};
    j["required"] = needs_all ? "C1-C4" : "C1-C2";
    j["ok"] = ok;
    if (!opts.out.empty()) write_file(opts.out, j.dump(2) + "\n");
    else if (opts.quiet) out << j.dump() << "\n";
    return ok ? kExitOk : kExitConfig;
  });
}

int cmd_simulate(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.configs.empty()) throw ConfigError("--config", "simulate needs at least one config");
    if (opts.models.size() > 1 && opts.models.size() != opts.configs.size()) {
      throw ConfigError("--model", "give one model for all configs or one per config");
    }
    std::vector<ExperimentConfig> configs;
    std::vector<std::string> model_paths;
    for (std::size_t i = 0; i < opts.configs.size(); ++i) {
      configs.push_back(resolve_config(opts.configs[i], opts.seed));
      const std::string mp = opts.models.empty() ? "" : opts.models.size() == 1 ? opts.models[0] : opts.models[i];
      if (configs.back().uses_gp() && mp.empty()) {
        throw ConfigError("--model", configs.back().name + " (" + to_string(configs.back().controller) +
                                         ") needs a trained model");
      }
      model_paths.push_back(configs.back().uses_gp() ? mp : "");
    }
    std::map<std::string, int> seen;
    for (const auto& c : configs) {
      if (++seen[c.name] > 1) throw ConfigError("name", "batch holds two runs named '" + c.name + "'");
    }
    std::vector<std::string> lines(configs.size());
    parallel_for(static_cast<int>(configs.size()), toolkit_threads(), [&](int i) {
      const ExperimentConfig& c = configs[i];
      std::optional<std::pair<GpVectorModel, GpVectorModel>> models;
      if (!model_paths[i].empty()) models = load_model(model_paths[i]);
      const RunResult r = run_scenario(c, models);
      const std::string root = opts.out.empty() ? c.output : opts.out;
      write_run(root + "/" + c.name, c, r, model_paths[i]);
      lines[i] = summary_line(c, r);
    });
    if (!opts.quiet) {
      for (const auto& l : lines) out << l << "\n";
    }
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// Report

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int col(const std::string& prefix) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i].rfind(prefix + " ", 0) == 0 || header[i] == prefix) return static_cast<int>(i);
    }
    return -1;
  }
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty csv " + path);
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) t.header.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct RunData {
  std::string name;
  Json stats;
  CsvTable trace;
  std::optional<CsvTable> plane;
};

// Long-format figure file: run,<columns...> from the named trace columns.
void write_figure(const std::string& path, const std::vector<const RunData*>& runs,
                  const std::vector<std::pair<std::string, std::string>>& columns, const std::string& note) {
  std::string text = "# " + note + "\nrun";
  for (const auto& c : columns) text += "," + c.first;
  text += "\n";
  char buf[40];
  for (const RunData* r : runs) {
    std::vector<int> idx;
    for (const auto& c : columns) idx.push_back(r->trace.col(c.second));
    for (const auto& row : r->trace.rows) {
      text += r->name;
      for (int i : idx) {
        if (i >= 0 && i < static_cast<int>(row.size())) {
          std::snprintf(buf, sizeof(buf), ",%.10g", row[i]);
          text += buf;
        } else {
          text += ",";
        }
      }
      text += "\n";
    }
  }
  write_file(path, text);
}

std::string mean_pm(const Json& s, const char* key, std::size_t i) {
  if (!s.contains(key) || s[key].size() <= i) return "-";
  return fmt("%.4f", s[key][i]["mean"].get<double>()) + " +- " + fmt("%.4f", s[key][i]["stddev"].get<double>());
}

}  // namespace

int cmd_report(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.inputs.size() != 1) throw ConfigError("run directory", "report takes one directory of runs");
    const fs::path root(opts.inputs[0]);
    if (!fs::is_directory(root)) throw Error("not a directory: " + root.string());
    const std::string dest = opts.out.empty() ? (root / "report").string() : opts.out;

    std::vector<RunData> runs;
    std::vector<std::string> gaps;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory() && fs::absolute(e.path()) != fs::absolute(fs::path(dest))) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const bool has_stats = fs::exists(d / "stats.json");
      const bool has_trace = fs::exists(d / "trace.csv");
      if (!has_stats && !has_trace) continue;
      if (!has_stats || !has_trace) {
        gaps.push_back(d.filename().string() + " (missing " + (has_stats ? "trace.csv" : "stats.json") + ")");
        continue;
      }
      RunData r;
      r.name = d.filename().string();
      r.stats = Json::parse(read_file((d / "stats.json").string()));
      r.trace = read_csv((d / "trace.csv").string());
      if (fs::exists(d / "error_plane.csv")) r.plane = read_csv((d / "error_plane.csv").string());
      runs.push_back(std::move(r));
    }
    for (const auto& p : preset_names()) {
      const bool found = std::any_of(runs.begin(), runs.end(), [&](const RunData& r) { return r.name == p; });
      if (!found) gaps.push_back(p + " (no run)");
    }
    fs::create_directories(dest);

    std::vector<const RunData*> furuta, leg_eic, leg_peic, leg;
    for (const auto& r : runs) {
      const std::string robot = r.stats.value("robot", "");
      const std::string ctrl = r.stats.value("controller", "");
      if (robot == "furuta") furuta.push_back(&r);
      if (robot == "leg3") {
        leg.push_back(&r);
        (ctrl == "peic-gp" ? leg_peic : leg_eic).push_back(&r);
      }
    }
    std::vector<std::string> written;
    auto fig = [&](const std::string& file, const std::vector<const RunData*>& rs,
                   const std::vector<std::pair<std::string, std::string>>& cols, const std::string& note) {
      if (rs.empty()) {
        gaps.push_back(file + " (no matching runs)");
        return;
      }
      write_figure(dest + "/" + file, rs, cols, note);
      written.push_back(file);
    };
    fig("pendulum_arm.csv", furuta, {{"t", "t"}, {"theta1", "q1"}, {"theta1_ref", "qd1"}}, "arm angle and reference");
    fig("pendulum_angle.csv", furuta, {{"t", "t"}, {"theta2", "q2"}, {"theta2_bem", "qu_e1"}, {"theta2_bem_true", "qu_e_true1"}},
        "pendulum angle and balance equilibrium");
    fig("pendulum_errors.csv", furuta, {{"t", "t"}, {"e1", "e_a1"}, {"e2", "e_u1"}}, "tracking errors");
    fig("leg_peic_tracking.csv", leg_peic,
        {{"t", "t"}, {"theta1", "q1"}, {"theta1_ref", "qd1"}, {"theta2", "q2"}, {"theta2_ref", "qd2"}, {"theta3", "q3"}, {"theta3_bem", "qu_e1"}},
        "partitioned controller: joint angles");
    fig("leg_peic_errors.csv", leg_peic, {{"t", "t"}, {"e_theta1", "e_a1"}, {"e_theta2", "e_a2"}, {"e_theta3", "e_u1"}},
        "partitioned controller: errors");
    fig("leg_eic_tracking.csv", leg_eic,
        {{"t", "t"}, {"theta1", "q1"}, {"theta1_ref", "qd1"}, {"theta2", "q2"}, {"theta2_ref", "qd2"}, {"theta3", "q3"}},
        "classic controller on the leg: joint angles up to divergence");
    fig("leg_eic_projection.csv", leg_eic, {{"t", "t"}, {"p_a1", "p_a1"}, {"p_a2", "p_a2"}, {"kernel_component", "kernel_motion"}},
        "classic controller: V^T q_a and kernel component");
    fig("leg_peic_projection.csv", leg_peic, {{"t", "t"}, {"p_a1", "p_a1"}, {"p_a2", "p_a2"}, {"kernel_component", "kernel_motion"}},
        "partitioned controller: V^T q_a and kernel component");
    {
      std::vector<const RunData*> planes;
      for (const auto* r : leg_peic) {
        if (r->plane) planes.push_back(r);
      }
      if (planes.empty()) {
        gaps.push_back("leg_peic_error_plane.csv (no matching runs)");
      } else {
        std::string text = "# error trajectory in the (|e_q|, |edot_q|) plane with the bound radius\nrun,t,norm_e_q,norm_edot_q,radius\n";
        char buf[160];
        for (const auto* r : planes) {
          for (const auto& row : r->plane->rows) {
            std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g,%.10g\n", r->name.c_str(), row[0], row[1], row[2], row[3]);
            text += buf;
          }
        }
        write_file(dest + "/leg_peic_error_plane.csv", text);
        written.push_back("leg_peic_error_plane.csv");
      }
    }

    std::string summary = "Tracking error summary (mean +- std of |e| after the start window)\n\n";
    if (!furuta.empty()) {
      summary += "Rotary pendulum\n";
      std::string h = "         ";
      std::string l1 = "e1 (rad) ";
      std::string l2 = "e2 (rad) ";
      std::string st = "status   ";
      for (const auto* r : furuta) {
        char b[64];
        std::snprintf(b, sizeof(b), " | %-24s", r->name.c_str());
        h += b;
        std::snprintf(b, sizeof(b), " | %-24s", mean_pm(r->stats, "e_a", 0).c_str());
        l1 += b;
        std::snprintf(b, sizeof(b), " | %-24s", mean_pm(r->stats, "e_u", 0).c_str());
        l2 += b;
        std::string status = r->stats.value("status", "?");
        if (r->stats.value("diverged", false)) status += " t=" + fmt("%.2f", r->stats["diverged_time"].get<double>());
        std::snprintf(b, sizeof(b), " | %-24s", status.c_str());
        st += b;
      }
      summary += h + "\n" + l1 + "\n" + l2 + "\n" + st + "\n\n";
    }
    if (!leg.empty()) {
      summary += "Leg\n";
      for (const auto* r : leg) {
        summary += r->name + " (" + r->stats.value("controller", "?") + "): " + r->stats.value("status", "?");
        if (r->stats.value("diverged", false)) {
          summary += " at t=" + fmt("%.2f", r->stats["diverged_time"].get<double>()) + " s";
        } else {
          summary += ", e_theta1 " + mean_pm(r->stats, "e_a", 0) + ", e_theta2 " + mean_pm(r->stats, "e_a", 1) +
                     ", e_theta3 " + mean_pm(r->stats, "e_u", 0);
        }
        summary += "\n";
      }
      summary += "\n";
    }
    summary += "Plot data: ";
    for (std::size_t i = 0; i < written.size(); ++i) summary += (i ? ", " : "") + written[i];
    summary += "\n";
    if (!gaps.empty()) {
      summary += "Gaps:\n";
      for (const auto& g : gaps) summary += "  " + g + "\n";
    }
    write_file(dest + "/summary.txt", summary);
    if (!opts.quiet) out << summary;
    return kExitOk;
  });
}

}  // namespace balance
