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

// Experiment configuration. One JSON document per experiment; the grammar
// is documented in README.md. Every field has a default, so a config only
// needs the keys it changes.

#ifndef BALANCE_CONFIG_H_
#define BALANCE_CONFIG_H_

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "balance/dynamics.h"
#include "balance/eic.h"
#include "balance/gp.h"
#include "balance/peic.h"
#include "balance/sim.h"

namespace balance {

inline constexpr const char* kToolkitVersion = "0.3.0";

enum class RobotKind { kFuruta, kLeg3 };
enum class ControllerKind { kEicModel, kEicGp, kPeicGp };

std::string to_string(RobotKind kind);
std::string to_string(ControllerKind kind);
std::string to_string(NominalKind kind);

struct GpSettings {
  InputSpec input_spec;
  AccelPolicy accel_policy = AccelPolicy::kPreviousStep;
  int N = 400;
  double eta = 0.9;
  TrainOptions optimizer;
};

// Affine constants of the error bound. Missing values are fitted on a
// calibration run that starts with q_u offset by `calibration_offset`.
struct BoundSettings {
  std::optional<double> c1, c2, c3, c4;
  double calibration_offset = 0.05;  // rad
  double transient = 5.0;            // s, excluded from the in-bound check
  int sweep_points = 21;
};

struct ExperimentConfig {
  std::string name = "experiment";
  RobotKind robot = RobotKind::kFuruta;
  // Parameter overrides on the plant, by name (see plant_parameter_names).
  std::map<std::string, double> plant;
  ControllerKind controller = ControllerKind::kEicGp;
  // eic-model only: overrides applied to the plant parameters to form the
  // controller's model. Empty means the exact plant.
  std::map<std::string, double> model;
  bool model_frictionless = false;
  NominalKind nominal = NominalKind::kFurutaS1;
  Mat custom_D;  // nominal == custom
  Vec custom_H;
  std::vector<int> au_indices;  // empty: the last m actuated coordinates
  GainSchedule outer{10, 50, 3, 10, 1e-3, 1e6};
  GainSchedule inner{1000, 500, 100, 200, 1e-3, 1e6};
  std::vector<std::vector<SineTerm>> reference;
  double control_hz = 400.0;
  int substeps = 10;
  double duration = 25.0;
  std::uint64_t seed = 1;
  double bem_cutoff_hz = 1.0;
  double condition_limit = 1e8;
  double balance_limit = 1.5707963267948966;
  double speed_limit = 50.0;
  std::optional<double> torque_limit;
  double encoder_noise = 0.0;
  Vec initial_q;     // empty: zeros
  Vec initial_qdot;  // empty: zeros
  GpSettings gp;
  ExcitationSpec excitation;
  BoundSettings bound;
  std::string output = "runs";

  int n() const { return robot == RobotKind::kFuruta ? 1 : 2; }
  int m() const { return 1; }
  int dof() const { return n() + m(); }
  bool uses_gp() const { return controller != ControllerKind::kEicModel; }

  // Throws ConfigError naming the first offending field.
  void validate() const;
};

// Parses a JSON document; unknown keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
// Complete document, every field written.
std::string serialize_config(const ExperimentConfig& config);

std::vector<std::string> preset_names();
// Throws ConfigError for an unknown name.
ExperimentConfig preset(const std::string& name);

std::vector<std::string> plant_parameter_names(RobotKind robot);
FurutaParams furuta_params(const std::map<std::string, double>& overrides);
LegParams leg_params(const std::map<std::string, double>& overrides);

// Object builders.
std::unique_ptr<RobotModel> make_plant(const ExperimentConfig& config);
// The eic-model controller's model: plant parameters with `model` applied.
std::unique_ptr<RobotModel> make_controller_model(const ExperimentConfig& config);
NominalModel make_nominal(const ExperimentConfig& config);
Partition make_partition(const ExperimentConfig& config);
Reference make_reference(const ExperimentConfig& config);
SimOptions make_sim_options(const ExperimentConfig& config);
JointState make_initial_state(const ExperimentConfig& config);

}  // namespace balance

#endif  // BALANCE_CONFIG_H_
