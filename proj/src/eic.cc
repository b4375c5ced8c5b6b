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

#include "balance/eic.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "balance/errors.h"

namespace balance {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_len(const Vec& v, Eigen::Index len, const char* what) {
  if (v.size() != len) {
    throw DimensionError(std::string(what) + " has length " + std::to_string(v.size()) +
                         ", expected " + std::to_string(len));
  }
}

Mat clamp_eigen(const Mat& K, double lo, double hi) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (K + K.transpose()));
  Vec ev = es.eigenvalues().cwiseMax(lo).cwiseMin(hi);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

AuxGains AuxGains::diagonal(int dim, double kp, double kd) {
  AuxGains g;
  g.kp = kp * Mat::Identity(dim, dim);
  g.kd = kd * Mat::Identity(dim, dim);
  return g;
}

void AuxGains::validate(double k_low, double k_high) const {
  for (const Mat* K : {&kp, &kd}) {
    if (K->rows() != K->cols()) throw DimensionError("gain matrix must be square");
    if ((*K - K->transpose()).cwiseAbs().maxCoeff() > 1e-12) {
      throw ConfigError("gains", "gain matrix must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(*K);
    if (es.eigenvalues().minCoeff() <= 0.0 || es.eigenvalues().minCoeff() < k_low - 1e-12 ||
        es.eigenvalues().maxCoeff() > k_high + 1e-12) {
      throw ConfigError("gains", "gain eigenvalues outside the admissible bounds");
    }
  }
}

AuxGains adaptive_gains(const GainSchedule& s, const Vec& Sigma) {
  if ((Sigma.array() < 0.0).any()) throw DimensionError("variance entries must be non-negative");
  AuxGains g;
  const Eigen::Index k = Sigma.size();
  Mat kp = Mat::Zero(k, k);
  Mat kd = Mat::Zero(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    kp(i, i) = s.kp_base + s.kp_slope * Sigma(i);
    kd(i, i) = s.kd_base + s.kd_slope * Sigma(i);
  }
  g.kp = clamp_eigen(kp, s.k_low, s.k_high);
  g.kd = clamp_eigen(kd, s.k_low, s.k_high);
  return g;
}

Vec outer_aux(const JointState& state, const TrajectoryPoint& ref, const AuxGains& gains) {
  const Eigen::Index n = ref.q.size();
  check_len(ref.qdot, n, "reference qdot");
  check_len(ref.qddot, n, "reference qddot");
  if (gains.kp.rows() != n || gains.kd.rows() != n) {
    throw DimensionError("outer gains do not match the actuated dimension");
  }
  const Vec e = state.q.head(n) - ref.q;
  const Vec ed = state.qdot.head(n) - ref.qdot;
  return ref.qddot - gains.kp * e - gains.kd * ed;
}

Vec internal_accel(const DynamicsEval& eval, const Vec& v) {
  check_len(v, eval.n, "auxiliary control");
  const Mat Duu = eval.Duu();
  Eigen::JacobiSVD<Mat> svd(Duu);
  const Vec& sv = svd.singularValues();
  if (!(sv(sv.size() - 1) > 0.0) || sv(0) / sv(sv.size() - 1) > 1e12) {
    throw SingularityError("D_uu is near singular");
  }
  return -Duu.partialPivLu().solve(eval.Dua() * v + eval.Hu());
}

Vec control_uext(const DynamicsEval& eval, const Vec& v_ext) {
  const Vec qdd_u = internal_accel(eval, v_ext);
  return eval.Daa() * v_ext + eval.Dau() * qdd_u + eval.Ha();
}

Vec control_uext(const DynamicsSource& dyn, const JointState& state, const Vec& v_ext) {
  return control_uext(dyn.eval(state), v_ext);
}

Vec control_uint(const DynamicsEval& eval, const Vec& v_int) { return control_uext(eval, v_int); }

Vec control_uint(const DynamicsSource& dyn, const JointState& state, const Vec& v_int) {
  return control_uext(dyn.eval(state), v_int);
}

JointState bem_state(const JointState& state, int n, const Vec& qu, const Vec& v_ext) {
  const int dof = state.dof();
  const int m = dof - n;
  check_len(qu, m, "q_u candidate");
  check_len(v_ext, n, "v_ext");
  JointState s = state;
  s.q.tail(m) = qu;
  s.qdot.tail(m).setZero();
  Vec qdd = Vec::Zero(dof);
  qdd.head(n) = v_ext;
  s.qddot = qdd;
  return s;
}

Vec bem_residual(const DynamicsSource& dyn, const JointState& state, const Vec& qu,
                 const Vec& v_ext) {
  const int n = dyn.partition().n;
  const DynamicsEval e = dyn.eval(bem_state(state, n, qu, v_ext));
  return e.Dua() * v_ext + e.Hu();
}

namespace {

struct NewtonResult {
  Vec x;
  double norm;
  int iterations;
};

NewtonResult damped_newton(const DynamicsSource& dyn, const JointState& state, const Vec& v_ext,
                           Vec x, const BemOptions& opts) {
  const Eigen::Index m = x.size();
  auto clampv = [&opts](Vec v) { return v.cwiseMax(opts.lo).cwiseMin(opts.hi); };
  x = clampv(x);
  Vec r = bem_residual(dyn, state, x, v_ext);
  double norm = r.norm();
  int it = 0;
  for (; it < opts.max_newton && norm > opts.tol; ++it) {
    Mat J(m, m);
    const double h = 1e-6;
    for (Eigen::Index j = 0; j < m; ++j) {
      Vec xp = x;
      Vec xm = x;
      xp(j) += h;
      xm(j) -= h;
      J.col(j) = (bem_residual(dyn, state, xp, v_ext) - bem_residual(dyn, state, xm, v_ext)) /
                 (2.0 * h);
    }
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible()) break;
    const Vec dx = lu.solve(-r);
    double lambda = 1.0;
    bool accepted = false;
    while (lambda > 1e-4) {
      const Vec xn = clampv(x + lambda * dx);
      const Vec rn = bem_residual(dyn, state, xn, v_ext);
      if (rn.norm() < (1.0 - 1e-4 * lambda) * norm) {
        x = xn;
        r = rn;
        norm = rn.norm();
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) break;
  }
  return {x, norm, it};
}

}  // namespace

BEMSolution solve_bem(const DynamicsSource& dyn, const JointState& state, const Vec& v_ext,
                      const Vec& guess, const BemOptions& opts) {
  const int m = dyn.partition().m;
  check_len(guess, m, "BEM guess");
  if (!(opts.lo < opts.hi) || opts.grid < 2) throw ConfigError("bem", "invalid bracket or grid");

  BEMSolution sol;
  NewtonResult nr = damped_newton(dyn, state, v_ext, guess, opts);
  sol.iterations = nr.iterations;
  if (nr.norm <= opts.tol) {
    sol.qu_e = nr.x;
    sol.residual_norm = nr.norm;
    sol.qu_e_dot = Vec::Zero(m);
    sol.qu_e_ddot = Vec::Zero(m);
    return sol;
  }

  sol.used_scan = true;
  const double step = (opts.hi - opts.lo) / (opts.grid - 1);
  Vec best;
  if (m == 1) {
    std::vector<double> g(opts.grid);
    std::vector<double> r(opts.grid);
    Vec x(1);
    for (int k = 0; k < opts.grid; ++k) {
      g[k] = opts.lo + k * step;
      x(0) = g[k];
      r[k] = bem_residual(dyn, state, x, v_ext)(0);
    }
    int chosen = -1;
    double chosen_dist = std::numeric_limits<double>::infinity();
    double best_abs = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (int k = 0; k < opts.grid; ++k) {
      if (std::abs(r[k]) < best_abs) {
        best_abs = std::abs(r[k]);
        best_k = k;
      }
      if (k + 1 < opts.grid && (r[k] == 0.0 || r[k] * r[k + 1] < 0.0)) {
        const double dist = std::abs(0.5 * (g[k] + g[k + 1]) - guess(0));
        if (dist < chosen_dist) {
          chosen_dist = dist;
          chosen = k;
        }
      }
    }
    if (chosen >= 0) {
      double a = g[chosen];
      double b = g[chosen + 1];
      double ra = r[chosen];
      for (int it = 0; it < 200 && b - a > 1e-15; ++it) {
        const double c = 0.5 * (a + b);
        x(0) = c;
        const double rc = bem_residual(dyn, state, x, v_ext)(0);
        ++sol.iterations;
        if (rc == 0.0) {
          a = b = c;
          break;
        }
        if ((rc < 0.0) == (ra < 0.0)) {
          a = c;
          ra = rc;
        } else {
          b = c;
        }
      }
      best = Vec::Constant(1, 0.5 * (a + b));
    } else {
      best = Vec::Constant(1, g[best_k]);
    }
  } else {
    std::vector<int> idx(m, 0);
    double best_norm = std::numeric_limits<double>::infinity();
    Vec x(m);
    while (true) {
      for (int j = 0; j < m; ++j) x(j) = opts.lo + idx[j] * step;
      const double nrm = bem_residual(dyn, state, x, v_ext).norm();
      if (nrm < best_norm) {
        best_norm = nrm;
        best = x;
      }
      int j = 0;
      while (j < m && ++idx[j] == opts.grid) idx[j++] = 0;
      if (j == m) break;
    }
  }
  NewtonResult polish = damped_newton(dyn, state, v_ext, best, opts);
  sol.iterations += polish.iterations;
  const double direct = bem_residual(dyn, state, best, v_ext).norm();
  if (direct <= polish.norm) {
    polish.x = best;
    polish.norm = direct;
  }
  if (!(polish.norm <= opts.tol)) {
    throw BemNotFoundError("no balance equilibrium in [" + std::to_string(opts.lo) + ", " +
                           std::to_string(opts.hi) + "], min residual " +
                           std::to_string(polish.norm));
  }
  sol.qu_e = polish.x;
  sol.residual_norm = polish.norm;
  sol.qu_e_dot = Vec::Zero(m);
  sol.qu_e_ddot = Vec::Zero(m);
  return sol;
}

Vec control_vint(const DynamicsEval& eval, const Vec& v_u_int) {
  check_len(v_u_int, eval.m, "v_u_int");
  const Mat Dua = eval.Dua();
  Eigen::JacobiSVD<Mat> svd(Dua, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec& sv = svd.singularValues();
  if (!(sv(eval.m - 1) >= 1e-10)) {
    throw ControllabilityError("D_ua is rank deficient (smallest singular value " +
                               std::to_string(sv(eval.m - 1)) + ")");
  }
  const Vec rhs = eval.Hu() + eval.Duu() * v_u_int;
  // D_ua^+ = V [Lambda_m^-1; 0] U^T
  const Vec w = (svd.matrixU().transpose() * rhs).cwiseQuotient(sv);
  return -(svd.matrixV().leftCols(eval.m) * w);
}

Vec control_vint(const DynamicsSource& dyn, const JointState& state, const Vec& v_u_int) {
  return control_vint(dyn.eval(state), v_u_int);
}

SVDAnalysis analyze_svd(const DynamicsEval& eval, const Vec& q_a, const Vec& v_ext,
                        const SVDAnalysis* previous) {
  const int n = eval.n;
  const int m = eval.m;
  check_len(q_a, n, "q_a");
  check_len(v_ext, n, "v_ext");
  Eigen::JacobiSVD<Mat> svd(eval.Dua(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  SVDAnalysis a;
  a.U = svd.matrixU();
  a.V = svd.matrixV();
  a.sigma.resize(m);
  for (int i = 0; i < m; ++i) {
    a.sigma(i) = svd.singularValues()(m - 1 - i);
    a.U.col(i) = svd.matrixU().col(m - 1 - i);
    a.V.col(i) = svd.matrixV().col(m - 1 - i);
  }
  if (previous && previous->V.rows() == n) {
    for (int j = 0; j < n; ++j) {
      if (a.V.col(j).dot(previous->V.col(j)) < 0.0) {
        a.V.col(j) *= -1.0;
        if (j < m) a.U.col(j) *= -1.0;
      }
    }
  }
  a.rank_deficient = !(a.sigma(0) >= 1e-10);
  a.p_a = a.V.transpose() * q_a;
  a.nu_ext = a.V.transpose() * v_ext;
  a.kernel_basis = a.V.rightCols(n - m);
  return a;
}

SVDAnalysis analyze_svd(const DynamicsSource& dyn, const JointState& state, const Vec& q_a,
                        const Vec& v_ext, const SVDAnalysis* previous) {
  return analyze_svd(dyn.eval(state), q_a, v_ext, previous);
}

// ---------------------------------------------------------------------------

BemTracker::BemTracker(double dt, double cutoff_hz) : dt_(dt) {
  if (!(dt > 0.0) || !(cutoff_hz > 0.0)) throw ConfigError("bem", "dt and cutoff must be positive");
  const double tau = 1.0 / (2.0 * kPi * cutoff_hz);
  alpha_ = dt / (dt + tau);
}

void BemTracker::reset() {
  prev_.resize(0);
  vel_.resize(0);
  acc_.resize(0);
}

void BemTracker::update(BEMSolution& sol) {
  const Eigen::Index m = sol.qu_e.size();
  if (prev_.size() != m) {
    prev_ = sol.qu_e;
    vel_ = Vec::Zero(m);
    acc_ = Vec::Zero(m);
  } else {
    const Vec raw_vel = (sol.qu_e - prev_) / dt_;
    const Vec vel = vel_ + alpha_ * (raw_vel - vel_);
    const Vec raw_acc = (vel - vel_) / dt_;
    acc_ += alpha_ * (raw_acc - acc_);
    vel_ = vel;
    prev_ = sol.qu_e;
  }
  sol.qu_e_dot = vel_;
  sol.qu_e_ddot = acc_;
}

// ---------------------------------------------------------------------------

EicController::EicController(std::shared_ptr<const DynamicsSource> model, GainSchedule outer,
                             GainSchedule inner, double dt, BemOptions bem, double bem_cutoff_hz)
    : model_(std::move(model)),
      outer_(outer),
      inner_(inner),
      bem_(bem),
      tracker_(dt, bem_cutoff_hz) {
  if (!model_) throw ConfigError("controller", "model is required");
}

void EicController::reset() {
  tracker_.reset();
  svd_prev_.reset();
}

ControlOutput EicController::compute(const JointState& state, const TrajectoryPoint& ref) {
  const int n = model_->partition().n;
  const int m = model_->partition().m;
  state.validate(n + m);
  const DynamicsEval e = model_->eval(state);
  const Vec var = model_->variance(state);

  ControlOutput out;
  out.Sigma_a = var.head(n);
  out.Sigma_u = var.tail(m);
  const AuxGains g1 = adaptive_gains(outer_, out.Sigma_a);
  const AuxGains g2 = adaptive_gains(inner_, out.Sigma_u);
  out.kp1_diag = g1.kp.diagonal();
  out.kd1_diag = g1.kd.diagonal();
  out.kp2_diag = g2.kp.diagonal();
  out.kd2_diag = g2.kd.diagonal();

  out.v_ext = outer_aux(state, ref, g1);
  const Vec guess = tracker_.has_previous() ? tracker_.previous() : Vec::Zero(m);
  BEMSolution sol = solve_bem(*model_, state, out.v_ext, guess, bem_);
  tracker_.update(sol);
  out.qu_e = sol.qu_e;
  out.qu_e_dot = sol.qu_e_dot;
  out.qu_e_ddot = sol.qu_e_ddot;

  out.e_a = state.q.head(n) - ref.q;
  out.e_u = state.q.tail(m) - sol.qu_e;
  const Vec ed_u = state.qdot.tail(m) - sol.qu_e_dot;
  out.v_u_int = sol.qu_e_ddot - g2.kp * out.e_u - g2.kd * ed_u;
  const Vec v_int = control_vint(e, out.v_u_int);
  out.u = control_uint(e, v_int);

  SVDAnalysis svd = analyze_svd(e, state.q.head(n), out.v_ext, svd_prev_ ? &*svd_prev_ : nullptr);
  out.p_a = svd.p_a;
  out.sigma = svd.sigma;
  out.kernel_motion = (svd.kernel_basis.transpose() * out.e_a).norm();
  svd_prev_ = std::move(svd);
  return out;
}

}  // namespace balance
