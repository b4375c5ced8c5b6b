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

// Rigid-body dynamics of underactuated balance robots in the form
//
//   D(q) qddot + C(q, qdot) qdot + G(q) = B u,   B = [I_n; 0],
//
// with coordinates ordered q = [q_a; q_u] (n actuated, then m unactuated).
// Two ground-truth plants (Furuta pendulum, planar three-link leg) and the
// closed-form nominal models share one evaluation contract, DynamicsSource.

#ifndef BALANCE_DYNAMICS_H_
#define BALANCE_DYNAMICS_H_

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace balance {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct JointState {
  Vec q;
  Vec qdot;
  std::optional<Vec> qddot;

  JointState() = default;
  JointState(Vec q_in, Vec qdot_in) : q(std::move(q_in)), qdot(std::move(qdot_in)) {}
  JointState(Vec q_in, Vec qdot_in, Vec qddot_in)
      : q(std::move(q_in)), qdot(std::move(qdot_in)), qddot(std::move(qddot_in)) {}

  int dof() const { return static_cast<int>(q.size()); }
  // Throws DimensionError unless all vectors have length `dof` and are finite.
  void validate(int dof) const;
};

// Split of the n actuated coordinates into q_aa (n - m, directly tracked)
// and q_au (m, assigned to balance). Indices are 0-based positions in q_a.
struct Partition {
  int n = 0;
  int m = 0;
  std::vector<int> au_indices;
  std::vector<int> aa_indices;

  // q_au = the last m actuated coordinates.
  static Partition make(int n, int m);
  static Partition make(int n, int m, std::vector<int> au_indices);
  void validate() const;
  int dof() const { return n + m; }
};

struct DynamicsEval {
  int n = 0;
  int m = 0;
  Mat D;  // (n+m) x (n+m)
  Mat C;  // (n+m) x (n+m)
  Vec G;  // n+m
  Vec H;  // C qdot + G
  Mat B;  // (n+m) x n

  Mat Daa() const { return D.topLeftCorner(n, n); }
  Mat Dau() const { return D.topRightCorner(n, m); }
  Mat Dua() const { return D.bottomLeftCorner(m, n); }
  Mat Duu() const { return D.bottomRightCorner(m, m); }
  Vec Ha() const { return H.head(n); }
  Vec Hu() const { return H.tail(m); }
};

// Input matrix [I_n; 0].
Mat input_matrix(int n, int m);

// Anything that can produce D, H at a state: plants, nominal models, and
// GP-enhanced models. Implementations are immutable after construction and
// safe to evaluate concurrently.
class DynamicsSource {
 public:
  virtual ~DynamicsSource() = default;

  virtual const Partition& partition() const = 0;
  virtual DynamicsEval eval(const JointState& state) const = 0;
  // Per-coordinate model variance (length n+m). Analytic models are exact.
  virtual Vec variance(const JointState& state) const;
  virtual std::string name() const = 0;

  int dof() const { return partition().dof(); }
};

// A physical plant. Ground truth for the simulator only.
class RobotModel : public DynamicsSource {
 public:
  // Kinetic plus potential energy (J).
  virtual double energy(const JointState& state) const = 0;
  // Copy with all viscous friction removed, for conservation checks.
  virtual std::unique_ptr<RobotModel> frictionless() const = 0;
};

// Rotary (Furuta) pendulum. q = [theta1 (arm), theta2 (pendulum, from
// upright)]; both links are uniform rods.
struct FurutaParams {
  double arm_mass = 0.5;          // kg
  double arm_length = 0.15;       // m
  double pendulum_mass = 1.06;    // kg
  double pendulum_length = 0.25;  // m
  double rotor_inertia = 0.022;   // kg m^2
  double arm_friction = 0.005;    // N m s / rad
  double pendulum_friction = 0.002;
  double gravity = 9.81;
};

class FurutaPlant final : public RobotModel {
 public:
  explicit FurutaPlant(FurutaParams params = {});
  const Partition& partition() const override { return partition_; }
  DynamicsEval eval(const JointState& state) const override;
  double energy(const JointState& state) const override;
  std::unique_ptr<RobotModel> frictionless() const override;
  std::string name() const override { return "furuta"; }
  const FurutaParams& params() const { return params_; }

 private:
  FurutaParams params_;
  Partition partition_;
};

// Planar three-link leg in a vertical plane. q = [theta1, theta2, theta3]
// are absolute link angles measured from the upright vertical; links 1 and
// 2 are actuated, link 3 balances on top.
struct LegLink {
  double mass = 1.0;      // kg
  double length = 0.2;    // m, joint to joint
  double com = 0.1;       // m, from the lower joint
  double inertia = 0.0;   // kg m^2 about the centre of mass
  double friction = 0.01; // N m s / rad
};

struct LegParams {
  LegLink links[3] = {
      {1.0, 0.04, 0.020, 0.002, 0.01},
      {4.5, 0.08, 0.040, 0.002, 0.01},
      {5.6, 0.30, 0.112, 0.030, 0.01},
  };
  // Reflected actuator inertia on the two actuated coordinates, kg m^2.
  double actuator_inertia[2] = {0.1315, 0.105};
  double gravity = 9.81;
};

class LegPlant final : public RobotModel {
 public:
  explicit LegPlant(LegParams params = {});
  const Partition& partition() const override { return partition_; }
  DynamicsEval eval(const JointState& state) const override;
  double energy(const JointState& state) const override;
  std::unique_ptr<RobotModel> frictionless() const override;
  std::string name() const override { return "leg3"; }
  const LegParams& params() const { return params_; }

 private:
  LegParams params_;
  Partition partition_;
};

// Closed-form nominal models. D-bar and H-bar only; C is reported as zero
// and G carries H-bar.
enum class NominalKind { kFurutaS1, kFurutaS2, kLegDefault, kCustom };

class NominalModel final : public DynamicsSource {
 public:
  static NominalModel furuta_s1();
  static NominalModel furuta_s2();
  static NominalModel leg_default();
  // Constant user-supplied D-bar and H-bar.
  static NominalModel custom(int n, int m, Mat D, Vec H);

  const Partition& partition() const override { return partition_; }
  DynamicsEval eval(const JointState& state) const override;
  std::string name() const override;
  NominalKind kind() const { return kind_; }
  const Mat& constant_D() const { return D_; }
  const Vec& constant_H() const { return H_; }

 private:
  NominalModel(NominalKind kind, Partition partition) : kind_(kind), partition_(std::move(partition)) {}
  NominalKind kind_;
  Partition partition_;
  Mat D_;
  Vec H_;
};

// eval() with the dimension check made explicit.
DynamicsEval eval_plant(const RobotModel& model, const JointState& state);
DynamicsEval eval_nominal(const NominalModel& nominal, const JointState& state);

// D^{-1} (B u - H). Throws SingularityError when cond(D) > 1e12.
Vec forward_accel(const DynamicsEval& eval, const Vec& u);

}  // namespace balance

#endif  // BALANCE_DYNAMICS_H_
