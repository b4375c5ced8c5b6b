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

#ifndef BALANCE_SIM_H_
#define BALANCE_SIM_H_

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "balance/dynamics.h"
#include "balance/eic.h"
#include "balance/peic.h"

namespace balance {

struct SineTerm {
  double amplitude = 0.0;  // rad (reference) or N m (excitation)
  double omega = 0.0;      // rad/s
  double phase = 0.0;      // rad
};

// Sum of sinusoids per actuated joint.
class Reference {
 public:
  Reference() = default;
  explicit Reference(std::vector<std::vector<SineTerm>> joints) : joints_(std::move(joints)) {}

  static Reference zero(int n) { return Reference(std::vector<std::vector<SineTerm>>(n)); }

  int dim() const { return static_cast<int>(joints_.size()); }
  TrajectoryPoint at(double t) const;
  const std::vector<std::vector<SineTerm>>& joints() const { return joints_; }

 private:
  std::vector<std::vector<SineTerm>> joints_;
};

// Classical RK4 with u held over the step. Throws Error on a non-finite
// result.
JointState rk4_step(const RobotModel& model, const JointState& state, const Vec& u, double h);

struct SimOptions {
  double duration = 10.0;   // s
  double control_hz = 400.0;
  int substeps = 10;
  double balance_limit = 1.5707963267948966;  // |q_u - goal| threshold, rad
  double speed_limit = 50.0;                  // |qdot| threshold, rad/s
  Vec goal;                                   // q_u goal, zeros when empty
  std::optional<double> torque_limit;         // symmetric clamp, N m
  double encoder_noise = 0.0;                 // std of q noise, rad
  std::uint64_t seed = 1;
  // Also solve the BEM of the plant itself under the controller's v_ext.
  bool true_bem = true;
  BemOptions bem;
  double bem_cutoff_hz = 10.0;
};

// One row per control tick. Vectors of a column share their length.
struct SimTrace {
  std::vector<double> t;
  std::vector<Vec> q, qdot, qddot, u;   // qddot: plant truth at the tick
  std::vector<Vec> q_d, qdot_d, qddot_d;
  std::vector<Vec> qu_e, qu_e_dot, qu_e_ddot;
  std::vector<Vec> e_a, e_u;
  std::vector<Vec> qu_e_true, qu_e_true_dot, qu_e_true_ddot, e_u_true;
  std::vector<Vec> v_u_int;
  std::vector<Vec> Sigma_a, Sigma_u;
  std::vector<Vec> kp1, kd1, kp2, kd2;  // gain diagonals
  std::vector<Vec> p_a, sigma;
  std::vector<double> kernel_motion;

  int n = 0;
  int m = 0;
  bool diverged = false;
  bool bem_failed = false;
  bool controller_failed = false;
  double diverged_time = -1.0;
  std::string message;
  int true_bem_failures = 0;

  std::size_t size() const { return t.size(); }
  void write_csv(const std::string& path) const;
};

// Runs the loop from `initial`. Controller errors end the run with the
// matching flag set; divergence ends it with `diverged`.
SimTrace run_closed_loop(const RobotModel& plant, Controller& controller,
                         const Reference& reference, const JointState& initial,
                         const SimOptions& options);

struct ExcitationSpec {
  std::vector<std::vector<SineTerm>> torque;  // per input
  double duration = 20.0;                     // total simulated time, s
  double episode = 2.0;                       // max episode length, s
  double control_hz = 400.0;
  int substeps = 10;
  Vec q_lo, q_hi;        // clamps; an episode ends when left
  double speed_limit = 20.0;
  Vec init_lo, init_hi;  // initial (q, qdot) box, length 2 (n+m)
  int target_samples = 400;
  bool finite_difference_accel = false;  // central differences of qdot
  std::uint64_t seed = 1;
};

struct ExcitationData {
  std::vector<JointState> states;  // with qddot
  std::vector<Vec> controls;
  int collected = 0;  // before downsampling
  int episodes = 0;
  int truncated_episodes = 0;
};

// Open-loop sum-of-sines excitation in episodes. Each episode starts from a
// seeded draw in the initial box with seeded phase offsets and ends at the
// episode length or a clamp violation. The log is downsampled to
// min(target, collected) rows by uniform stride.
ExcitationData run_excitation(const RobotModel& plant, const ExcitationSpec& spec);

struct JointStats {
  double mean = 0.0;
  double stddev = 0.0;
  double max = 0.0;
};

struct ErrorStats {
  std::vector<JointStats> e_a;
  std::vector<JointStats> e_u;
  double window_start = 2.0;
  int rows = 0;
};

// Mean and standard deviation of |e| per joint over t >= window_start.
std::vector<JointStats> abs_stats(const std::vector<double>& t, const std::vector<Vec>& e,
                                  double window_start);
ErrorStats error_stats(const SimTrace& trace, double window_start = 2.0, bool true_bem = false);

// (|e_q|, |edot_q|) per tick with e_q = [e_a; e_u] against the estimated
// BEM.
std::vector<std::pair<double, double>> error_plane(const SimTrace& trace);

// Fits c1..c4 on a calibration trace (rows with t >= window_start). Per row
//   e   = [e_q; edot_q]
//   O   = eddot_q + kp e_q + kd edot_q        with the logged gains
//   dv  = v_u_int - (v_u_int under the plant's own BEM)
//   hot = max(0, |O| - l_a |kappa_a| - l_u |kappa_u| - (1 + d_u2 / sigma1) |dv|)
// then (c3, c4) envelope |dv| and (c1, c2) envelope hot against |e|. The
// slopes are capped so that d2 <= d2_max, half of it to each envelope. The
// trace must carry the plant BEM columns. Other fields are copied from
// `params`.
ErrorBoundParams calibrate_bound(const SimTrace& trace, const ErrorBoundParams& params,
                                 double window_start = 2.0,
                                 double d2_max = std::numeric_limits<double>::infinity());

// Bounding box of the visited (q, qdot) after window_start.
SampleRegion visited_region(const SimTrace& trace, double window_start = 0.0, int samples = 500);

// |e| = |[e_q; edot_q]| per row, matching error_plane.
std::vector<double> error_norms(const SimTrace& trace);

}  // namespace balance

#endif  // BALANCE_SIM_H_
