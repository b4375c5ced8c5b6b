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

// Partial EIC (PEIC) control on a GP-enhanced model.
//
// The model is D-bar qddot + H-bar + mu(x) = B u with one GP per residual
// row. The actuated coordinates split into q_aa (tracked directly) and q_au
// (m coordinates assigned to balance), so the balance inversion uses the
// square block D-bar_ua^u instead of a pseudo-inverse.

#ifndef BALANCE_PEIC_H_
#define BALANCE_PEIC_H_

#include <complex>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "balance/dynamics.h"
#include "balance/eic.h"
#include "balance/gp.h"

namespace balance {

// How qddot enters the GP input at control time.
enum class AccelPolicy {
  kPreviousStep,  // last measured acceleration
  kOmit,          // zeros (for models trained without qddot)
};

std::string to_string(AccelPolicy policy);
AccelPolicy parse_accel_policy(const std::string& s);

class GpDynamics final : public DynamicsSource {
 public:
  GpDynamics(NominalModel nominal, std::shared_ptr<const GpVectorModel> gp_a,
             std::shared_ptr<const GpVectorModel> gp_u,
             AccelPolicy policy = AccelPolicy::kPreviousStep);

  const Partition& partition() const override { return nominal_.partition(); }
  // D-bar with H = H-bar + mu. C is zero and G carries H.
  DynamicsEval eval(const JointState& state) const override;
  // [Sigma_a; Sigma_u].
  Vec variance(const JointState& state) const override;
  std::string name() const override { return "gp+" + nominal_.name(); }

  // Mean and variance of both residual models at the state.
  struct Residual {
    Prediction a;
    Prediction u;
  };
  Residual predict(const JointState& state) const;

  const NominalModel& nominal() const { return nominal_; }
  const GpVectorModel& gp_a() const { return *gp_a_; }
  const GpVectorModel& gp_u() const { return *gp_u_; }
  AccelPolicy policy() const { return policy_; }

 private:
  JointState input_state(const JointState& state) const;

  NominalModel nominal_;
  std::shared_ptr<const GpVectorModel> gp_a_;
  std::shared_ptr<const GpVectorModel> gp_u_;
  AccelPolicy policy_;
};

struct GpEnhancedEval {
  DynamicsEval eval;
  Prediction a;
  Prediction u;
};
GpEnhancedEval gp_enhanced_eval(const GpDynamics& gpdyn, const JointState& state);

// Training pairs for the residual models.
struct ResidualSample {
  Vec x;
  Vec target_a;  // n
  Vec target_u;  // m
};

// H^e = B u - D-bar qddot - H-bar, split into actuated and unactuated rows.
// Every state must carry qddot.
std::vector<ResidualSample> residual_targets(const NominalModel& nominal, const InputSpec& spec,
                                             const std::vector<JointState>& states,
                                             const std::vector<Vec>& controls);

struct ResidualModels {
  GpVectorModel a;
  GpVectorModel u;
  std::vector<TrainReport> reports;  // actuated channels first
};

// Trains one channel per residual row from `default_hyperparams`. Channels
// are independent and run on up to `threads` workers.
ResidualModels train_residual_models(const std::vector<ResidualSample>& samples,
                                     const InputSpec& spec, int dof, const TrainOptions& opts,
                                     int threads = 1);

// Operating region for sampled checks.
struct SampleRegion {
  Vec q_lo;
  Vec q_hi;
  Vec qdot_lo;
  Vec qdot_hi;
  int samples = 500;
  std::uint64_t seed = 7;

  // q in [-pi/2, pi/2], qdot in [-2, 2].
  static SampleRegion around_upright(int dof);
  std::vector<JointState> draw() const;
};

struct ConditionReport {
  // C1
  bool c1 = false;
  double max_asymmetry = 0.0;
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  double d = 0.0;  // max |D-bar|_2
  double h = 0.0;  // max |H-bar|
  // C2
  bool c2 = false;
  int rank_daa = 0;  // minimum over samples
  int rank_duu = 0;
  int rank_dua = 0;
  // C3
  bool c3 = false;
  bool c3_auto = false;
  double max_kernel_angle = 0.0;  // rad
  // C4
  bool c4 = false;
  bool c4_auto = false;
  double worst_condition = 0.0;  // of D-bar_ua^u

  int samples = 0;
  double rank_tol = 1e-8;
  double angle_threshold = 1e-3;
  double condition_limit = 1e6;

  bool all() const { return c1 && c2 && c3 && c4; }
};

ConditionReport check_conditions(const DynamicsSource& nominal, const Partition& partition,
                                 const SampleRegion& region);

// Largest principal angle between the column spaces of two orthonormal
// bases.
double principal_angle(const Mat& A, const Mat& B);

// Blocks of D-bar under a partition.
struct PartitionBlocks {
  Mat Daa_a;   // aa x aa
  Mat Daa_au;  // aa x au
  Mat Daa_ua;  // au x aa
  Mat Daa_u;   // au x au
  Mat Dau_a;   // aa x m
  Mat Dau_u;   // au x m
  Mat Dua_a;   // m x aa
  Mat Dua_u;   // m x au
  Mat Duu;     // m x m
};
PartitionBlocks partition_blocks(const DynamicsEval& eval, const Partition& partition);

struct PeicLawResult {
  Vec u;
  Vec v_int;     // m, commanded qddot_au
  Vec qdd_cmd;   // n+m commanded accelerations
};

// Control law for given v_ext (n) and v_u_int (m):
//   v_int = -(D_ua^u)^-1 (D_ua^a v_a_ext + H_u + D_uu v_u_int)
//   u     = D_a. qdd_cmd + H_a,  qdd_cmd = [v_a_ext; v_int; v_u_int]
// Throws ControllabilityError when cond(D_ua^u) > condition_limit.
PeicLawResult peic_law(const DynamicsEval& eval, const Partition& partition, const Vec& v_ext,
                       const Vec& v_u_int, double condition_limit = 1e8);

// The classic EIC law for the same inputs, for comparison.
Vec eic_law(const DynamicsEval& eval, const Vec& v_u_int);

// Accelerations (qddot_au, qddot_u) that the model predicts for the q_au
// and q_u rows, given qddot_aa and the full input u.
Vec internal_response(const DynamicsEval& eval, const Partition& partition, const Vec& qdd_aa,
                      const Vec& u);

// BEM of the GP-enhanced model under v_ext (see solve_bem).
BEMSolution estimate_bem(const DynamicsSource& gpdyn, const JointState& state, const Vec& v_ext,
                         const Vec& guess, const BemOptions& opts = {});

class PeicController final : public Controller {
 public:
  PeicController(std::shared_ptr<const DynamicsSource> model, Partition partition,
                 GainSchedule outer, GainSchedule inner, double dt, BemOptions bem = {},
                 double bem_cutoff_hz = 10.0, double condition_limit = 1e8);

  ControlOutput compute(const JointState& state, const TrajectoryPoint& ref) override;
  void reset() override;
  std::string name() const override { return "peic:" + model_->name(); }

 private:
  std::shared_ptr<const DynamicsSource> model_;
  Partition partition_;
  GainSchedule outer_;
  GainSchedule inner_;
  BemOptions bem_;
  double condition_limit_;
  BemTracker tracker_;
  std::optional<SVDAnalysis> svd_prev_;
};

// Closed-loop error bound.
struct ErrorBoundParams {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double c4 = 0.0;
  double d_a1 = 1.0;
  double d_a2 = 1.0;
  double d_u1 = 1.0;
  double d_u2 = 1.0;
  double sigma1 = 1.0;
  double sigma_m = 1.0;
  double sigma_max_a = 0.0;
  double sigma_max_u = 0.0;
  Vec kappa_a;
  Vec kappa_u;
  double eta = 0.81;

  double d1() const { return c2 + (1.0 + d_u2 / sigma1) * c4; }
  double d2() const { return c1 + (d_u2 / sigma1) * c3; }
  double l_a() const { return sigma_max_a * (d_u1 + sigma_m) / (d_u1 * d_a1); }
  double l_u() const { return sigma_max_u / d_u1; }
};

// Fills the inertia-block constants by sampling the nominal model:
// d_a1/d_a2 bound the singular values of D-bar_aa, d_u1/d_u2 those of
// D-bar_uu, sigma1/sigma_m those of D-bar_ua^u.
void sample_block_bounds(const DynamicsSource& nominal, const Partition& partition,
                         const SampleRegion& region, ErrorBoundParams& params);

struct ErrorBoundResult {
  std::vector<std::complex<double>> eigenvalues;
  bool hurwitz = false;
  double p_norm = 0.0;
  double q_min_eig = 1.0;
  double d1 = 0.0;
  double d2 = 0.0;
  double l_a = 0.0;
  double l_u = 0.0;
  double radius = 0.0;  // +inf when the denominator is not positive
  double eta = 0.0;
};

// A = [[0, I], [-kp, -kd]], P from A^T P + P A = -I and
//   r = |P| (d1 + l_a |kappa_a| + l_u |kappa_u|) / (1/2 - |P| d2).
// Throws ControllabilityError when A is not Hurwitz.
ErrorBoundResult error_bound(const ErrorBoundParams& params, const Mat& kp, const Mat& kd);

// error_bound over a uniform grid of Sigma in [0, sigma_max^2], the same
// Sigma on every joint. kp = diag(outer (n), inner (m)).
struct BoundSweep {
  bool hurwitz = true;
  double radius = 0.0;              // largest over the grid
  double max_real_eigenvalue = 0.0; // largest over the grid
  double p_norm = 0.0;              // largest |P| over the grid
  int points = 0;
};
BoundSweep sweep_error_bound(const ErrorBoundParams& params, const GainSchedule& outer,
                             const GainSchedule& inner, int n, int m, double sigma_max,
                             int points = 21);

// Solves A^T P + P A = -Q.
Mat solve_lyapunov(const Mat& A, const Mat& Q);

// Upper affine envelope y <= c_slope x + c_offset: least-squares slope
// clipped to [0, max_slope], offset raised until every point lies below.
struct AffineEnvelope {
  double slope = 0.0;
  double offset = 0.0;
};
AffineEnvelope fit_affine_envelope(const std::vector<double>& x, const std::vector<double>& y,
                                   double max_slope = std::numeric_limits<double>::infinity());

}  // namespace balance

#endif  // BALANCE_PEIC_H_
