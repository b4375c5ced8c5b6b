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

// External/internal convertible (EIC) control.
//
// The outer loop computes v_ext for the actuated coordinates. The balance
// equilibrium manifold (BEM) q_u^e solves
//
//   Gamma0(q_u; v_ext) = D_ua v_ext + H_u |_{qdot_u = 0} = 0,
//
// and the inner loop replaces v_ext by
//
//   v_int = -D_ua^+ (H_u + D_uu v_u_int),
//
// whose component along ker(D_ua) is identically zero.

#ifndef BALANCE_EIC_H_
#define BALANCE_EIC_H_

#include <memory>
#include <optional>
#include <string>

#include "balance/dynamics.h"

namespace balance {

struct AuxGains {
  Mat kp;
  Mat kd;

  static AuxGains diagonal(int dim, double kp, double kd);
  // Symmetric with eigenvalues in [k_low, k_high] (k_low > 0).
  void validate(double k_low = 0.0, double k_high = 1e12) const;
};

// gain = base + slope * diag(Sigma), with eigenvalues clamped to
// [k_low, k_high]. Sigma has one entry per gain row (a scalar variance is
// broadcast).
struct GainSchedule {
  double kp_base = 1.0;
  double kp_slope = 0.0;
  double kd_base = 1.0;
  double kd_slope = 0.0;
  double k_low = 1e-3;
  double k_high = 1e6;
};

AuxGains adaptive_gains(const GainSchedule& schedule, const Vec& Sigma);

// Desired actuated trajectory point.
struct TrajectoryPoint {
  Vec q;
  Vec qdot;
  Vec qddot;
};

// v_ext = qddot_d - kp (q_a - q_d) - kd (qdot_a - qdot_d).
Vec outer_aux(const JointState& state, const TrajectoryPoint& ref, const AuxGains& gains);

// u = D_aa v + D_au qddot_u + H_a with qddot_u = -D_uu^-1 (D_ua v + H_u).
Vec control_uext(const DynamicsEval& eval, const Vec& v_ext);
Vec control_uext(const DynamicsSource& dyn, const JointState& state, const Vec& v_ext);
// Identical algebra with v_int in place of v_ext.
Vec control_uint(const DynamicsEval& eval, const Vec& v_int);
Vec control_uint(const DynamicsSource& dyn, const JointState& state, const Vec& v_int);

// Consistent unactuated acceleration -D_uu^-1 (D_ua v + H_u).
Vec internal_accel(const DynamicsEval& eval, const Vec& v);

// State used to evaluate Gamma0: q_u replaced, qdot_u zeroed and, for
// sources that read accelerations, qddot = [v_ext; 0].
JointState bem_state(const JointState& state, int n, const Vec& qu, const Vec& v_ext);

Vec bem_residual(const DynamicsSource& dyn, const JointState& state, const Vec& qu,
                 const Vec& v_ext);

struct BemOptions {
  double lo = -1.5707963267948966;
  double hi = 1.5707963267948966;
  int grid = 721;
  double tol = 1e-9;
  int max_newton = 50;
};

struct BEMSolution {
  Vec qu_e;
  double residual_norm = 0.0;
  int iterations = 0;
  bool used_scan = false;
  Vec qu_e_dot;
  Vec qu_e_ddot;
};

// Damped Newton from `guess`; on failure a grid scan over the bracket picks
// the root nearest the guess (m == 1) or the minimizer of |Gamma0| (m > 1),
// then polishes. Throws BemNotFoundError when no root reaches `tol`.
BEMSolution solve_bem(const DynamicsSource& dyn, const JointState& state, const Vec& v_ext,
                      const Vec& guess, const BemOptions& opts = {});

// Minimum-norm v_int = -D_ua^+ (H_u + D_uu v_u_int). Throws
// ControllabilityError when the smallest singular value of D_ua < 1e-10.
Vec control_vint(const DynamicsEval& eval, const Vec& v_u_int);
Vec control_vint(const DynamicsSource& dyn, const JointState& state, const Vec& v_u_int);

struct SVDAnalysis {
  Mat U;            // m x m
  Mat V;            // n x n
  Vec sigma;        // m, ascending
  Vec p_a;          // V^T q_a
  Vec nu_ext;       // V^T v_ext
  Mat kernel_basis; // n x (n - m)
  bool rank_deficient = false;
};

// SVD of D_ua with ascending singular values. When `previous` is given,
// columns of V (and the matching columns of U) are sign-aligned with it.
SVDAnalysis analyze_svd(const DynamicsEval& eval, const Vec& q_a, const Vec& v_ext,
                        const SVDAnalysis* previous = nullptr);
SVDAnalysis analyze_svd(const DynamicsSource& dyn, const JointState& state, const Vec& q_a,
                        const Vec& v_ext, const SVDAnalysis* previous = nullptr);

// Finite-difference BEM velocity and acceleration, each passed through a
// first-order low-pass filter.
class BemTracker {
 public:
  BemTracker(double dt, double cutoff_hz = 10.0);
  void reset();
  // Feeds the newest solution; fills qu_e_dot and qu_e_ddot.
  void update(BEMSolution& sol);
  bool has_previous() const { return prev_.size() > 0; }
  const Vec& previous() const { return prev_; }

 private:
  double dt_;
  double alpha_;
  Vec prev_;
  Vec vel_;
  Vec acc_;
};

// Per-tick controller diagnostics. Vectors are empty when not applicable.
struct ControlOutput {
  Vec u;
  Vec v_ext;
  Vec v_u_int;
  Vec qu_e;
  Vec qu_e_dot;
  Vec qu_e_ddot;
  Vec e_a;
  Vec e_u;
  Vec Sigma_a;
  Vec Sigma_u;
  Vec kp1_diag;
  Vec kd1_diag;
  Vec kp2_diag;
  Vec kd2_diag;
  Vec p_a;
  Vec sigma;
  double kernel_motion = 0.0;  // |kernel_basis^T (q_a - q_a^d)|
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual ControlOutput compute(const JointState& state, const TrajectoryPoint& ref) = 0;
  // Clears warm starts and filters.
  virtual void reset() = 0;
  virtual std::string name() const = 0;
};

// Classic EIC against any dynamics source. Gains follow the schedules with
// the source's reported variance (zero for analytic models).
class EicController final : public Controller {
 public:
  EicController(std::shared_ptr<const DynamicsSource> model, GainSchedule outer,
                GainSchedule inner, double dt, BemOptions bem = {}, double bem_cutoff_hz = 10.0);

  ControlOutput compute(const JointState& state, const TrajectoryPoint& ref) override;
  void reset() override;
  std::string name() const override { return "eic:" + model_->name(); }

 private:
  std::shared_ptr<const DynamicsSource> model_;
  GainSchedule outer_;
  GainSchedule inner_;
  BemOptions bem_;
  BemTracker tracker_;
  std::optional<SVDAnalysis> svd_prev_;
};

}  // namespace balance

#endif  // BALANCE_EIC_H_
