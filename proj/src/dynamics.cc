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

#include "balance/dynamics.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "balance/errors.h"

namespace balance {

void JointState::validate(int dof) const {
  auto check = [dof](const Vec& v, const char* what) {
    if (v.size() != dof) {
      throw DimensionError(std::string(what) + " has length " + std::to_string(v.size()) +
                           ", expected " + std::to_string(dof));
    }
    if (!v.allFinite()) throw DimensionError(std::string(what) + " is not finite");
  };
  check(q, "q");
  check(qdot, "qdot");
  if (qddot) check(*qddot, "qddot");
}

Partition Partition::make(int n, int m) {
  std::vector<int> au(m);
  std::iota(au.begin(), au.end(), n - m);
  return make(n, m, std::move(au));
}

Partition Partition::make(int n, int m, std::vector<int> au_indices) {
  Partition p;
  p.n = n;
  p.m = m;
  p.au_indices = std::move(au_indices);
  for (int i = 0; i < n; ++i) {
    if (std::find(p.au_indices.begin(), p.au_indices.end(), i) == p.au_indices.end()) {
      p.aa_indices.push_back(i);
    }
  }
  p.validate();
  return p;
}

void Partition::validate() const {
  if (m < 1 || n < m) {
    throw DimensionError("partition requires n >= m >= 1, got n=" + std::to_string(n) +
                         " m=" + std::to_string(m));
  }
  if (static_cast<int>(au_indices.size()) != m ||
      static_cast<int>(aa_indices.size()) != n - m) {
    throw DimensionError("partition index sets have wrong sizes");
  }
  std::vector<int> all(au_indices);
  all.insert(all.end(), aa_indices.begin(), aa_indices.end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < n; ++i) {
    if (all[i] != i) throw DimensionError("partition indices must cover 0..n-1 exactly once");
  }
}

Mat input_matrix(int n, int m) {
  Mat B = Mat::Zero(n + m, n);
  B.topRows(n).setIdentity();
  return B;
}

Vec DynamicsSource::variance(const JointState& state) const {
  return Vec::Zero(state.dof());
}

// ---------------------------------------------------------------------------
// Furuta pendulum

FurutaPlant::FurutaPlant(FurutaParams params)
    : params_(params), partition_(Partition::make(1, 1)) {}

DynamicsEval FurutaPlant::eval(const JointState& state) const {
  state.validate(2);
  const auto& p = params_;
  const double l = 0.5 * p.pendulum_length;
  const double j_pend = p.pendulum_mass * p.pendulum_length * p.pendulum_length / 3.0;
  const double j_arm = p.rotor_inertia + p.arm_mass * p.arm_length * p.arm_length / 3.0 +
                       p.pendulum_mass * p.arm_length * p.arm_length;
  const double coupling = p.pendulum_mass * p.arm_length * l;
  const double s = std::sin(state.q(1));
  const double c = std::cos(state.q(1));
  const double th1d = state.qdot(0);
  const double th2d = state.qdot(1);

  DynamicsEval e;
  e.n = 1;
  e.m = 1;
  e.D.resize(2, 2);
  e.D << j_arm + j_pend * s * s, -coupling * c,
         -coupling * c, j_pend;
  e.C.resize(2, 2);
  e.C << p.arm_friction + j_pend * s * c * th2d, j_pend * s * c * th1d + coupling * s * th2d,
         -j_pend * s * c * th1d, p.pendulum_friction;
  e.G.resize(2);
  e.G << 0.0, -p.pendulum_mass * p.gravity * l * s;
  e.H = e.C * state.qdot + e.G;
  e.B = input_matrix(1, 1);
  return e;
}

double FurutaPlant::energy(const JointState& state) const {
  DynamicsEval e = eval(state);
  const double l = 0.5 * params_.pendulum_length;
  return 0.5 * state.qdot.dot(e.D * state.qdot) +
         params_.pendulum_mass * params_.gravity * l * std::cos(state.q(1));
}

std::unique_ptr<RobotModel> FurutaPlant::frictionless() const {
  FurutaParams p = params_;
  p.arm_friction = 0.0;
  p.pendulum_friction = 0.0;
  return std::make_unique<FurutaPlant>(p);
}

// ---------------------------------------------------------------------------
// Three-link leg, absolute angles.
//
//   D_ii = I_i + m_i c_i^2 + sum_{k>i} m_k L_i^2
//   D_ij = beta_ij cos(th_i - th_j),  beta_ij = (m_j c_j + sum_{k>j} m_k L_j) L_i, i < j
//   G_i  = -(m_i c_i + sum_{k>i} m_k L_i) g sin(th_i)
//   (C qdot)_i = sum_j beta_ij sin(th_i - th_j) thdot_j^2 + b_i thdot_i

namespace {

struct LegConstants {
  double diag[3];
  double beta[3][3];
  double grav[3];
};

LegConstants leg_constants(const LegParams& p) {
  LegConstants k{};
  for (int i = 0; i < 3; ++i) {
    double outboard = 0.0;
    for (int j = i + 1; j < 3; ++j) outboard += p.links[j].mass;
    const LegLink& li = p.links[i];
    k.diag[i] = li.inertia + li.mass * li.com * li.com + outboard * li.length * li.length;
    k.grav[i] = (li.mass * li.com + outboard * li.length) * p.gravity;
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const int lo = std::min(i, j);
      const int hi = std::max(i, j);
      double outboard = 0.0;
      for (int k2 = hi + 1; k2 < 3; ++k2) outboard += p.links[k2].mass;
      k.beta[i][j] = (p.links[hi].mass * p.links[hi].com + outboard * p.links[hi].length) *
                     p.links[lo].length;
    }
  }
  return k;
}

}  // namespace

LegPlant::LegPlant(LegParams params) : params_(params), partition_(Partition::make(2, 1)) {}

DynamicsEval LegPlant::eval(const JointState& state) const {
  state.validate(3);
  const LegConstants k = leg_constants(params_);
  DynamicsEval e;
  e.n = 2;
  e.m = 1;
  e.D.resize(3, 3);
  e.C.setZero(3, 3);
  e.G.resize(3);
  for (int i = 0; i < 3; ++i) {
    e.D(i, i) = k.diag[i];
    e.C(i, i) = params_.links[i].friction;
    e.G(i) = -k.grav[i] * std::sin(state.q(i));
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double dth = state.q(i) - state.q(j);
      e.D(i, j) = k.beta[i][j] * std::cos(dth);
      e.C(i, j) = k.beta[i][j] * std::sin(dth) * state.qdot(j);
    }
  }
  e.D(0, 0) += params_.actuator_inertia[0];
  e.D(1, 1) += params_.actuator_inertia[1];
  e.H = e.C * state.qdot + e.G;
  e.B = input_matrix(2, 1);
  return e;
}

double LegPlant::energy(const JointState& state) const {
  DynamicsEval e = eval(state);
  const LegConstants k = leg_constants(params_);
  double potential = 0.0;
  // G_i = dV/dth_i with V_i proportional to cos(th_i).
  for (int i = 0; i < 3; ++i) potential += k.grav[i] * std::cos(state.q(i));
  return 0.5 * state.qdot.dot(e.D * state.qdot) + potential;
}

std::unique_ptr<RobotModel> LegPlant::frictionless() const {
  LegParams p = params_;
  for (auto& link : p.links) link.friction = 0.0;
  return std::make_unique<LegPlant>(p);
}

// ---------------------------------------------------------------------------
// Nominal models

NominalModel NominalModel::furuta_s1() {
  return NominalModel(NominalKind::kFurutaS1, Partition::make(1, 1));
}

NominalModel NominalModel::furuta_s2() {
  NominalModel nm(NominalKind::kFurutaS2, Partition::make(1, 1));
  nm.D_.resize(2, 2);
  nm.D_ << 0.02, 0.01,
           0.01, 0.02;
  nm.H_ = Vec::Zero(2);
  return nm;
}

NominalModel NominalModel::leg_default() {
  return NominalModel(NominalKind::kLegDefault, Partition::make(2, 1));
}

NominalModel NominalModel::custom(int n, int m, Mat D, Vec H) {
  NominalModel nm(NominalKind::kCustom, Partition::make(n, m));
  if (D.rows() != n + m || D.cols() != n + m || H.size() != n + m) {
    throw DimensionError("custom nominal: D must be (n+m)x(n+m) and H length n+m");
  }
  nm.D_ = std::move(D);
  nm.H_ = std::move(H);
  return nm;
}

std::string NominalModel::name() const {
  switch (kind_) {
    case NominalKind::kFurutaS1: return "s_n1";
    case NominalKind::kFurutaS2: return "s_n2";
    case NominalKind::kLegDefault: return "leg-default";
    case NominalKind::kCustom: return "custom";
  }
  return "unknown";
}

DynamicsEval NominalModel::eval(const JointState& state) const {
  const int dof = partition_.dof();
  state.validate(dof);
  DynamicsEval e;
  e.n = partition_.n;
  e.m = partition_.m;
  e.C = Mat::Zero(dof, dof);
  e.B = input_matrix(e.n, e.m);
  switch (kind_) {
    case NominalKind::kFurutaS1: {
      const double c2 = std::cos(state.q(1));
      e.D.resize(2, 2);
      e.D << 0.05, -0.02 * c2,
             -0.02 * c2, 0.02;
      e.G.resize(2);
      e.G << 0.0, -std::sin(state.q(1));
      break;
    }
    case NominalKind::kLegDefault: {
      const double c2 = std::cos(state.q(1));
      const double c3 = std::cos(state.q(2));
      const double c23 = std::cos(state.q(1) - state.q(2));
      e.D.resize(3, 3);
      e.D << 0.15, 0.025 * c2, 0.025 * c3,
             0.025 * c2, 0.15, 0.05 * c23,
             0.025 * c3, 0.05 * c23, 0.1;
      e.G.resize(3);
      e.G << 0.0, 0.2 * c2, 0.1 * std::sin(state.q(2));
      break;
    }
    case NominalKind::kFurutaS2:
    case NominalKind::kCustom:
      e.D = D_;
      e.G = H_;
      break;
  }
  e.H = e.G;
  return e;
}

DynamicsEval eval_plant(const RobotModel& model, const JointState& state) {
  state.validate(model.dof());
  return model.eval(state);
}

DynamicsEval eval_nominal(const NominalModel& nominal, const JointState& state) {
  state.validate(nominal.dof());
  return nominal.eval(state);
}

Vec forward_accel(const DynamicsEval& eval, const Vec& u) {
  if (u.size() != eval.n) {
    throw DimensionError("control has length " + std::to_string(u.size()) + ", expected " +
                         std::to_string(eval.n));
  }
  Eigen::JacobiSVD<Mat> svd(eval.D);
  const Vec& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || sv(0) / smin > 1e12) {
    throw SingularityError("inertia matrix is near singular");
  }
  return eval.D.partialPivLu().solve(eval.B * u - eval.H);
}

}  // namespace balance
