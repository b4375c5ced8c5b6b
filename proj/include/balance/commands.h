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

// Experiment pipeline behind balancectl: collect -> train -> simulate ->
// report, plus the nominal-model check. The cmd_* functions return process
// exit codes: 0 success (a diverged run is a success), 1 configuration
// error, 2 runtime failure.

#ifndef BALANCE_COMMANDS_H_
#define BALANCE_COMMANDS_H_

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "balance/config.h"

namespace balance {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

// Worker cap from TOOLKIT_THREADS; hardware concurrency when unset.
int toolkit_threads();

// ---------------------------------------------------------------------------
// Training data

struct Dataset {
  std::string config_name;
  RobotKind robot = RobotKind::kFuruta;
  NominalKind nominal = NominalKind::kFurutaS1;
  std::uint64_t seed = 1;
  InputSpec input_spec;
  int n = 0;
  int m = 0;
  int collected = 0;
  int episodes = 0;
  std::vector<JointState> states;  // with qddot
  std::vector<Vec> controls;
  std::vector<ResidualSample> samples;

  int rows() const { return static_cast<int>(samples.size()); }
};

// Excitation on the configured plant, N rows, residuals against the
// configured nominal.
Dataset collect_dataset(const ExperimentConfig& config);
std::string dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const std::string& text);
void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);

struct ChannelSummary {
  std::string group;  // "a" or "u"
  int index = 0;
  double nlml_before = 0.0;
  double nlml_after = 0.0;
  int iterations = 0;
  double kappa = 0.0;
  double varsigma = 0.0;
  double sigma_max = 0.0;
  double holdout_rmse = 0.0;  // hyperparameters fixed, fit on 80%
};

struct TrainedModels {
  GpVectorModel a;
  GpVectorModel u;
  std::vector<ChannelSummary> channels;
};

TrainedModels train_models(const Dataset& data, const GpSettings& gp, std::uint64_t seed,
                           int threads);

// ---------------------------------------------------------------------------
// Simulation

struct BoundReport {
  ErrorBoundParams params;
  BoundSweep sweep;
  bool calibration_diverged = false;
  int checked = 0;  // rows after the transient
  int inside = 0;
  double max_norm = 0.0;
};

struct RunResult {
  SimTrace trace;
  ErrorStats stats;      // e_u against the controller's BEM
  ErrorStats stats_true; // e_u against the plant's BEM
  std::optional<BoundReport> bound;
};

// Shared immutable GP dynamics for a config and trained models.
std::shared_ptr<const GpDynamics> make_gp_dynamics(const ExperimentConfig& config,
                                                   const GpVectorModel& a,
                                                   const GpVectorModel& u);

std::unique_ptr<Controller> make_controller(const ExperimentConfig& config,
                                            std::shared_ptr<const GpDynamics> gp);

// Runs the configured scenario. `models` is required for GP controllers.
// For peic-gp the bound constants are taken from the config or fitted on a
// calibration run.
RunResult run_scenario(const ExperimentConfig& config,
                       const std::optional<std::pair<GpVectorModel, GpVectorModel>>& models);

// Error bound for a finished run of a GP controller.
BoundReport evaluate_bound(const ExperimentConfig& config, const GpDynamics& gp,
                           const SimTrace& run);

// Writes config.json, manifest.json, trace.csv, stats.json, error_plane.csv,
// bound.json (when present) and summary.txt into `dir`.
void write_run(const std::string& dir, const ExperimentConfig& config, const RunResult& result,
               const std::string& model_path);

// One Table-1 style line.
std::string summary_line(const ExperimentConfig& config, const RunResult& result);

// ---------------------------------------------------------------------------
// Commands

struct CliOptions {
  std::vector<std::string> configs;  // path or preset name
  std::vector<std::string> models;
  std::vector<std::string> inputs;   // positional arguments
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

// Path if the file exists, otherwise a preset name.
ExperimentConfig resolve_config(const std::string& spec, const std::optional<std::uint64_t>& seed);

int cmd_collect(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_check(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_simulate(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_report(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_preset(const CliOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace balance

#endif  // BALANCE_COMMANDS_H_
