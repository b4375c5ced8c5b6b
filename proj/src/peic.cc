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

#include "balance/peic.h"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <random>

#include "balance/errors.h"

namespace balance {

namespace {

constexpr double kHalfPi = 1.5707963267948966;

Vec gather(const Vec& v, const std::vector<int>& idx) {
  Vec out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
  return out;
}

Mat gather(const Mat& M, const std::vector<int>& rows, const std::vector<int>& cols) {
  Mat out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = M(rows[i], cols[j]);
  }
  return out;
}

std::vector<int> range(int from, int count) {
  std::vector<int> r(count);
  for (int i = 0; i < count; ++i) r[i] = from + i;
  return r;
}

double condition_number(const Mat& M) {
  if (M.size() == 0) return 1.0;
  Eigen::JacobiSVD<Mat> svd(M);
  const Vec& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0)) return std::numeric_limits<double>::infinity();
  return sv(0) / smin;
}

}  // namespace

std::string to_string(AccelPolicy policy) {
  return policy == AccelPolicy::kOmit ? "omit" : "previous-step";
}

AccelPolicy parse_accel_policy(const std::string& s) {
  if (s == "previous-step") return AccelPolicy::kPreviousStep;
  if (s == "omit") return AccelPolicy::kOmit;
  throw ConfigError("gp.accel_policy", "expected 'previous-step' or 'omit', got '" + s + "'");
}

// ---------------------------------------------------------------------------

GpDynamics::GpDynamics(NominalModel nominal, std::shared_ptr<const GpVectorModel> gp_a,
                       std::shared_ptr<const GpVectorModel> gp_u, AccelPolicy policy)
    : nominal_(std::move(nominal)), gp_a_(std::move(gp_a)), gp_u_(std::move(gp_u)),
      policy_(policy) {
  if (!gp_a_ || !gp_u_ || !gp_a_->trained() || !gp_u_->trained()) {
    throw TrainingError("GP-enhanced dynamics requires trained residual models");
  }
  const Partition& p = nominal_.partition();
  if (gp_a_->outputs() != p.n || gp_u_->outputs() != p.m) {
    throw DimensionError("residual models must have n and m channels");
  }
  if (gp_a_->dof() != p.dof() || gp_u_->dof() != p.dof()) {
    throw DimensionError("residual models were trained for a different robot");
  }
}

JointState GpDynamics::input_state(const JointState& state) const {
  if (policy_ == AccelPolicy::kOmit) {
    JointState s = state;
    s.qddot.reset();
    return s;
  }
  return state;
}

GpDynamics::Residual GpDynamics::predict(const JointState& state) const {
  const JointState s = input_state(state);
  return {gp_a_->predict(s), gp_u_->predict(s)};
}

DynamicsEval GpDynamics::eval(const JointState& state) const {
  DynamicsEval e = nominal_.eval(state);
  const JointState s = input_state(state);
  e.H.head(e.n) += gp_a_->mean(gp_a_->input_spec().assemble(s));
  e.H.tail(e.m) += gp_u_->mean(gp_u_->input_spec().assemble(s));
  e.G = e.H;
  return e;
}

Vec GpDynamics::variance(const JointState& state) const {
  const Residual r = predict(state);
  Vec v(r.a.Sigma.size() + r.u.Sigma.size());
  v << r.a.Sigma, r.u.Sigma;
  return v;
}

GpEnhancedEval gp_enhanced_eval(const GpDynamics& gpdyn, const JointState& state) {
  GpEnhancedEval out;
  out.eval = gpdyn.nominal().eval(state);
  const GpDynamics::Residual r = gpdyn.predict(state);
  out.eval.H.head(out.eval.n) += r.a.mu;
  out.eval.H.tail(out.eval.m) += r.u.mu;
  out.eval.G = out.eval.H;
  out.a = r.a;
  out.u = r.u;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ResidualSample> residual_targets(const NominalModel& nominal, const InputSpec& spec,
                                             const std::vector<JointState>& states,
                                             const std::vector<Vec>& controls) {
  if (states.size() != controls.size()) {
    throw DimensionError("states and controls differ in count");
  }
  const int n = nominal.partition().n;
  const int m = nominal.partition().m;
  std::vector<ResidualSample> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    const JointState& s = states[i];
    if (!s.qddot) throw DimensionError("residual targets need accelerations");
    if (controls[i].size() != n) throw DimensionError("control has wrong length");
    const DynamicsEval e = nominal.eval(s);
    const Vec he = e.B * controls[i] - e.D * *s.qddot - e.H;
    ResidualSample r;
    r.x = spec.assemble(s);
    r.target_a = he.head(n);
    r.target_u = he.tail(m);
    out.push_back(std::move(r));
  }
  return out;
}

ResidualModels train_residual_models(const std::vector<ResidualSample>& samples,
                                     const InputSpec& spec, int dof, const TrainOptions& opts,
                                     int threads) {
  if (samples.size() < 2) throw TrainingError("need at least two residual samples");
  const Eigen::Index N = static_cast<Eigen::Index>(samples.size());
  const Eigen::Index dim = samples[0].x.size();
  const int n = static_cast<int>(samples[0].target_a.size());
  const int m = static_cast<int>(samples[0].target_u.size());
  if (dim != spec.input_dim(dof)) throw DimensionError("sample inputs do not match input spec");
  Mat X(N, dim);
  Mat Y(N, n + m);
  for (Eigen::Index i = 0; i < N; ++i) {
    X.row(i) = samples[i].x.transpose();
    Y.row(i).head(n) = samples[i].target_a.transpose();
    Y.row(i).tail(m) = samples[i].target_u.transpose();
  }

  const int channels = n + m;
  std::vector<GpChannel> trained(channels);
  std::vector<TrainReport> reports(channels);
  auto work = [&](int c) {
    TrainOptions o = opts;
    o.seed = opts.seed + static_cast<std::uint64_t>(c);
    const Vec y = Y.col(c);
    try {
      trained[c] = train_channel(X, y, default_hyperparams(X, y), o, &reports[c]);
    } catch (const TrainingError& e) {
      throw TrainingError("channel " + std::to_string(c) + ": " + e.what());
    }
  };
  const int workers = std::max(1, std::min(threads, channels));
  for (int start = 0; start < channels; start += workers) {
    std::vector<std::future<void>> jobs;
    for (int c = start; c < std::min(channels, start + workers); ++c) {
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, work, c));
    }
    for (auto& j : jobs) j.get();
  }
  ResidualModels out;
  out.a = GpVectorModel(spec, dof, std::vector<GpChannel>(trained.begin(), trained.begin() + n));
  out.u = GpVectorModel(spec, dof, std::vector<GpChannel>(trained.begin() + n, trained.end()));
  out.reports = std::move(reports);
  return out;
}

// ---------------------------------------------------------------------------

SampleRegion SampleRegion::around_upright(int dof) {
  SampleRegion r;
  r.q_lo = Vec::Constant(dof, -kHalfPi);
  r.q_hi = Vec::Constant(dof, kHalfPi);
  r.qdot_lo = Vec::Constant(dof, -2.0);
  r.qdot_hi = Vec::Constant(dof, 2.0);
  return r;
}

std::vector<JointState> SampleRegion::draw() const {
  const Eigen::Index dof = q_lo.size();
  if (q_hi.size() != dof || qdot_lo.size() != dof || qdot_hi.size() != dof) {
    throw DimensionError("sample region bounds disagree in length");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<JointState> out;
  out.reserve(samples);
  for (int k = 0; k < samples; ++k) {
    Vec q(dof);
    Vec qd(dof);
    for (Eigen::Index i = 0; i < dof; ++i) q(i) = q_lo(i) + (q_hi(i) - q_lo(i)) * unit(rng);
    for (Eigen::Index i = 0; i < dof; ++i) {
      qd(i) = qdot_lo(i) + (qdot_hi(i) - qdot_lo(i)) * unit(rng);
    }
    out.emplace_back(q, qd);
  }
  return out;
}

double principal_angle(const Mat& A, const Mat& B) {
  if (A.cols() == 0 || B.cols() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(A.transpose() * B);
  const double c = std::clamp(svd.singularValues().minCoeff(), 0.0, 1.0);
  return std::acos(c);
}

PartitionBlocks partition_blocks(const DynamicsEval& e, const Partition& p) {
  const std::vector<int> u = range(p.n, p.m);
  PartitionBlocks b;
  b.Daa_a = gather(e.D, p.aa_indices, p.aa_indices);
  b.Daa_au = gather(e.D, p.aa_indices, p.au_indices);
  b.Daa_ua = gather(e.D, p.au_indices, p.aa_indices);
  b.Daa_u = gather(e.D, p.au_indices, p.au_indices);
  b.Dau_a = gather(e.D, p.aa_indices, u);
  b.Dau_u = gather(e.D, p.au_indices, u);
  b.Dua_a = gather(e.D, u, p.aa_indices);
  b.Dua_u = gather(e.D, u, p.au_indices);
  b.Duu = gather(e.D, u, u);
  return b;
}

ConditionReport check_conditions(const DynamicsSource& nominal, const Partition& partition,
                                 const SampleRegion& region) {
  partition.validate();
  if (nominal.partition().n != partition.n || nominal.partition().m != partition.m) {
    throw DimensionError("partition does not match the nominal model");
  }
  const int n = partition.n;
  const int m = partition.m;
  const std::vector<JointState> states = region.draw();
  ConditionReport r;
  r.samples = static_cast<int>(states.size());
  r.min_eigenvalue = std::numeric_limits<double>::infinity();
  r.max_eigenvalue = -std::numeric_limits<double>::infinity();
  r.rank_daa = n;
  r.rank_duu = m;
  r.rank_dua = m;
  auto rank = [&r](const Mat& M) {
    Eigen::JacobiSVD<Mat> svd(M);
    return static_cast<int>((svd.singularValues().array() > r.rank_tol).count());
  };
  std::vector<Mat> kernels;
  for (const JointState& s : states) {
    const DynamicsEval e = nominal.eval(s);
    r.max_asymmetry = std::max(r.max_asymmetry, (e.D - e.D.transpose()).cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (e.D + e.D.transpose()));
    r.min_eigenvalue = std::min(r.min_eigenvalue, es.eigenvalues().minCoeff());
    r.max_eigenvalue = std::max(r.max_eigenvalue, es.eigenvalues().maxCoeff());
    Eigen::JacobiSVD<Mat> dsvd(e.D);
    r.d = std::max(r.d, dsvd.singularValues()(0));
    r.h = std::max(r.h, e.H.norm());
    r.rank_daa = std::min(r.rank_daa, rank(e.Daa()));
    r.rank_duu = std::min(r.rank_duu, rank(e.Duu()));
    r.rank_dua = std::min(r.rank_dua, rank(e.Dua()));
    if (n > m) {
      Eigen::JacobiSVD<Mat> ksvd(e.Dua(), Eigen::ComputeFullV);
      kernels.push_back(ksvd.matrixV().rightCols(n - m));
    }
    const PartitionBlocks b = partition_blocks(e, partition);
    r.worst_condition = std::max(r.worst_condition, condition_number(b.Dua_u));
  }
  r.c1 = r.max_asymmetry <= 1e-12 && r.min_eigenvalue > 0.0 && std::isfinite(r.d) &&
         std::isfinite(r.h);
  r.c2 = r.rank_daa == n && r.rank_duu == m && r.rank_dua == m;
  if (n == m) {
    r.c3_auto = true;
    r.c3 = true;
    r.c4_auto = true;
    r.c4 = true;
  } else {
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      for (std::size_t j = i + 1; j < kernels.size(); ++j) {
        r.max_kernel_angle = std::max(r.max_kernel_angle, principal_angle(kernels[i], kernels[j]));
      }
    }
    r.c3 = r.max_kernel_angle > r.angle_threshold;
    r.c4 = r.worst_condition < r.condition_limit;
  }
  return r;
}

// ---------------------------------------------------------------------------

PeicLawResult peic_law(const DynamicsEval& e, const Partition& p, const Vec& v_ext,
                       const Vec& v_u_int, double condition_limit) {
  if (v_ext.size() != p.n || v_u_int.size() != p.m || e.n != p.n || e.m != p.m) {
    throw DimensionError("PEIC law inputs do not match the partition");
  }
  const PartitionBlocks b = partition_blocks(e, p);
  const double cond = condition_number(b.Dua_u);
  if (!(cond <= condition_limit)) {
    throw ControllabilityError("D_ua^u condition number " + std::to_string(cond) +
                               " exceeds the limit");
  }
  const Vec v_a_ext = gather(v_ext, p.aa_indices);
  const Vec h_un = b.Dua_a * v_a_ext + e.Hu();
  PeicLawResult out;
  out.v_int = -b.Dua_u.partialPivLu().solve(h_un + b.Duu * v_u_int);
  out.qdd_cmd = Vec::Zero(p.n + p.m);
  for (std::size_t i = 0; i < p.aa_indices.size(); ++i) out.qdd_cmd(p.aa_indices[i]) = v_a_ext(i);
  for (std::size_t i = 0; i < p.au_indices.size(); ++i) out.qdd_cmd(p.au_indices[i]) = out.v_int(i);
  out.qdd_cmd.tail(p.m) = v_u_int;
  out.u = e.D.topRows(p.n) * out.qdd_cmd + e.Ha();
  return out;
}

Vec eic_law(const DynamicsEval& eval, const Vec& v_u_int) {
  return control_uint(eval, control_vint(eval, v_u_int));
}

Vec internal_response(const DynamicsEval& e, const Partition& p, const Vec& qdd_aa, const Vec& u) {
  if (qdd_aa.size() != p.n - p.m || u.size() != p.n) {
    throw DimensionError("internal response inputs do not match the partition");
  }
  // Rows au and u of D qddot + H = B u, unknowns (qddot_au, qddot_u).
  std::vector<int> rows = p.au_indices;
  std::vector<int> unknowns = p.au_indices;
  for (int i = 0; i < p.m; ++i) {
    rows.push_back(p.n + i);
    unknowns.push_back(p.n + i);
  }
  const Mat A = gather(e.D, rows, unknowns);
  const Vec bu = e.B * u;
  const Vec rhs = gather(bu, rows) - gather(e.H, rows) -
                  gather(e.D, rows, p.aa_indices) * qdd_aa;
  return A.partialPivLu().solve(rhs);
}

BEMSolution estimate_bem(const DynamicsSource& gpdyn, const JointState& state, const Vec& v_ext,
                         const Vec& guess, const BemOptions& opts) {
  return solve_bem(gpdyn, state, v_ext, guess, opts);
}

// ---------------------------------------------------------------------------

PeicController::PeicController(std::shared_ptr<const DynamicsSource> model, Partition partition,
                               GainSchedule outer, GainSchedule inner, double dt, BemOptions bem,
                               double bem_cutoff_hz, double condition_limit)
    : model_(std::move(model)),
      partition_(std::move(partition)),
      outer_(outer),
      inner_(inner),
      bem_(bem),
      condition_limit_(condition_limit),
      tracker_(dt, bem_cutoff_hz) {
  if (!model_) throw ConfigError("controller", "model is required");
  partition_.validate();
  if (partition_.n != model_->partition().n || partition_.m != model_->partition().m) {
    throw DimensionError("controller partition does not match the model");
  }
}

void PeicController::reset() {
  tracker_.reset();
  svd_prev_.reset();
}

ControlOutput PeicController::compute(const JointState& state, const TrajectoryPoint& ref) {
  const int n = partition_.n;
  const int m = partition_.m;
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
  BEMSolution sol = estimate_bem(*model_, state, out.v_ext, guess, bem_);
  tracker_.update(sol);
  out.qu_e = sol.qu_e;
  out.qu_e_dot = sol.qu_e_dot;
  out.qu_e_ddot = sol.qu_e_ddot;

  out.e_a = state.q.head(n) - ref.q;
  out.e_u = state.q.tail(m) - sol.qu_e;
  const Vec ed_u = state.qdot.tail(m) - sol.qu_e_dot;
  out.v_u_int = sol.qu_e_ddot - g2.kp * out.e_u - g2.kd * ed_u;
  out.u = peic_law(e, partition_, out.v_ext, out.v_u_int, condition_limit_).u;

  SVDAnalysis svd = analyze_svd(e, state.q.head(n), out.v_ext, svd_prev_ ? &*svd_prev_ : nullptr);
  out.p_a = svd.p_a;
  out.sigma = svd.sigma;
  out.kernel_motion = (svd.kernel_basis.transpose() * out.e_a).norm();
  svd_prev_ = std::move(svd);
  return out;
}

// ---------------------------------------------------------------------------

void sample_block_bounds(const DynamicsSource& nominal, const Partition& partition,
                         const SampleRegion& region, ErrorBoundParams& params) {
  const double inf = std::numeric_limits<double>::infinity();
  params.d_a1 = inf;
  params.d_a2 = 0.0;
  params.d_u1 = inf;
  params.d_u2 = 0.0;
  params.sigma1 = inf;
  params.sigma_m = 0.0;
  for (const JointState& s : region.draw()) {
    const DynamicsEval e = nominal.eval(s);
    const PartitionBlocks b = partition_blocks(e, partition);
    Eigen::JacobiSVD<Mat> sa(e.Daa());
    Eigen::JacobiSVD<Mat> su(e.Duu());
    Eigen::JacobiSVD<Mat> sua(b.Dua_u);
    params.d_a1 = std::min(params.d_a1, sa.singularValues().minCoeff());
    params.d_a2 = std::max(params.d_a2, sa.singularValues().maxCoeff());
    params.d_u1 = std::min(params.d_u1, su.singularValues().minCoeff());
    params.d_u2 = std::max(params.d_u2, su.singularValues().maxCoeff());
    params.sigma1 = std::min(params.sigma1, sua.singularValues().minCoeff());
    params.sigma_m = std::max(params.sigma_m, sua.singularValues().maxCoeff());
  }
}

Mat solve_lyapunov(const Mat& A, const Mat& Q) {
  const Eigen::Index k = A.rows();
  const Mat I = Mat::Identity(k, k);
  // vec(A^T P + P A) = (I kron A^T + A^T kron I) vec(P)
  Mat L(k * k, k * k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      L.block(i * k, j * k, k, k) = I(i, j) * A.transpose() + A(j, i) * I;
    }
  }
  const Mat negQ = -Q;
  const Vec q = Eigen::Map<const Vec>(negQ.data(), k * k);
  const Vec p = L.fullPivLu().solve(q);
  Mat P = Eigen::Map<const Mat>(p.data(), k, k);
  return 0.5 * (P + P.transpose());
}

ErrorBoundResult error_bound(const ErrorBoundParams& params, const Mat& kp, const Mat& kd) {
  const Eigen::Index k = kp.rows();
  if (kp.cols() != k || kd.rows() != k || kd.cols() != k) {
    throw DimensionError("kp and kd must be square and of equal size");
  }
  Mat A = Mat::Zero(2 * k, 2 * k);
  A.topRightCorner(k, k).setIdentity();
  A.bottomLeftCorner(k, k) = -kp;
  A.bottomRightCorner(k, k) = -kd;
  ErrorBoundResult r;
  Eigen::EigenSolver<Mat> es(A);
  r.hurwitz = true;
  for (Eigen::Index i = 0; i < 2 * k; ++i) {
    r.eigenvalues.push_back(es.eigenvalues()(i));
    if (!(es.eigenvalues()(i).real() < 0.0)) r.hurwitz = false;
  }
  if (!r.hurwitz) throw ControllabilityError("closed-loop error matrix is not Hurwitz");
  const Mat Q = Mat::Identity(2 * k, 2 * k);
  const Mat P = solve_lyapunov(A, Q);
  Eigen::SelfAdjointEigenSolver<Mat> ps(P);
  r.p_norm = ps.eigenvalues().cwiseAbs().maxCoeff();
  r.q_min_eig = 1.0;
  r.d1 = params.d1();
  r.d2 = params.d2();
  r.l_a = params.l_a();
  r.l_u = params.l_u();
  r.eta = params.eta;
  const double ka = params.kappa_a.size() ? params.kappa_a.norm() : 0.0;
  const double ku = params.kappa_u.size() ? params.kappa_u.norm() : 0.0;
  const double num = r.p_norm * (r.d1 + r.l_a * ka + r.l_u * ku);
  const double den = 0.5 * r.q_min_eig - r.p_norm * r.d2;
  r.radius = den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
  return r;
}

BoundSweep sweep_error_bound(const ErrorBoundParams& params, const GainSchedule& outer,
                             const GainSchedule& inner, int n, int m, double sigma_max,
                             int points) {
  if (points < 2) throw DimensionError("a bound sweep needs at least two points");
  BoundSweep sw;
  sw.points = points;
  sw.max_real_eigenvalue = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double s = sigma_max * sigma_max * i / (points - 1);
    const AuxGains ga = adaptive_gains(outer, Vec::Constant(n, s));
    const AuxGains gu = adaptive_gains(inner, Vec::Constant(m, s));
    Mat kp = Mat::Zero(n + m, n + m);
    Mat kd = Mat::Zero(n + m, n + m);
    kp.topLeftCorner(n, n) = ga.kp;
    kd.topLeftCorner(n, n) = ga.kd;
    kp.bottomRightCorner(m, m) = gu.kp;
    kd.bottomRightCorner(m, m) = gu.kd;
    try {
      const ErrorBoundResult r = error_bound(params, kp, kd);
      for (const auto& ev : r.eigenvalues) sw.max_real_eigenvalue = std::max(sw.max_real_eigenvalue, ev.real());
      sw.radius = std::max(sw.radius, r.radius);
      sw.p_norm = std::max(sw.p_norm, r.p_norm);
    } catch (const ControllabilityError&) {
      sw.hurwitz = false;
      sw.radius = std::numeric_limits<double>::infinity();
      sw.max_real_eigenvalue = std::max(sw.max_real_eigenvalue, 0.0);
    }
  }
  return sw;
}

AffineEnvelope fit_affine_envelope(const std::vector<double>& x, const std::vector<double>& y,
                                   double max_slope) {
  if (x.size() != y.size() || x.empty()) throw DimensionError("envelope fit needs paired samples");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  AffineEnvelope env;
  env.slope = sxx > 0.0 ? std::clamp(sxy / sxx, 0.0, std::max(0.0, max_slope)) : 0.0;
  env.offset = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.size(); ++i) env.offset = std::max(env.offset, y[i] - env.slope * x[i]);
  env.offset = std::max(env.offset, 0.0);
  return env;
}

}  // namespace balance
