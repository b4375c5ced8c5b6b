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

#include "balance/sim.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "balance/errors.h"

namespace balance {

namespace {

constexpr double kTwoPi = 6.283185307179586;

Vec clamp_torque(Vec u, const std::optional<double>& limit) {
  if (limit) u = u.cwiseMax(-*limit).cwiseMin(*limit);
  return u;
}

Vec sine_sum(const std::vector<std::vector<SineTerm>>& terms, const std::vector<double>& offsets,
             double t) {
  Vec u = Vec::Zero(terms.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    for (const SineTerm& s : terms[i]) {
      u(i) += s.amplitude * std::sin(s.omega * t + s.phase + offsets[k++]);
    }
  }
  return u;
}

}  // namespace

TrajectoryPoint Reference::at(double t) const {
  const int n = dim();
  TrajectoryPoint p{Vec::Zero(n), Vec::Zero(n), Vec::Zero(n)};
  for (int i = 0; i < n; ++i) {
    for (const SineTerm& s : joints_[i]) {
      const double arg = s.omega * t + s.phase;
      p.q(i) += s.amplitude * std::sin(arg);
      p.qdot(i) += s.amplitude * s.omega * std::cos(arg);
      p.qddot(i) -= s.amplitude * s.omega * s.omega * std::sin(arg);
    }
  }
  return p;
}

JointState rk4_step(const RobotModel& model, const JointState& state, const Vec& u, double h) {
  if (!(h > 0.0)) throw ConfigError("sim.step", "step must be positive");
  auto accel = [&model, &u](const Vec& q, const Vec& qd) {
    return forward_accel(model.eval(JointState(q, qd)), u);
  };
  const Vec& q = state.q;
  const Vec& v = state.qdot;
  const Vec a1 = accel(q, v);
  const Vec q2 = q + 0.5 * h * v;
  const Vec v2 = v + 0.5 * h * a1;
  const Vec a2 = accel(q2, v2);
  const Vec q3 = q + 0.5 * h * v2;
  const Vec v3 = v + 0.5 * h * a2;
  const Vec a3 = accel(q3, v3);
  const Vec q4 = q + h * v3;
  const Vec v4 = v + h * a3;
  const Vec a4 = accel(q4, v4);
  JointState next(q + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4),
                  v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4));
  if (!next.q.allFinite() || !next.qdot.allFinite()) throw Error("integration produced a non-finite state");
  return next;
}

// ---------------------------------------------------------------------------

SimTrace run_closed_loop(const RobotModel& plant, Controller& controller,
                         const Reference& reference, const JointState& initial,
                         const SimOptions& opt) {
  const int n = plant.partition().n;
  const int m = plant.partition().m;
  initial.validate(n + m);
  if (reference.dim() != n) throw DimensionError("reference must have one entry per actuated joint");
  if (!(opt.control_hz > 0.0) || opt.substeps < 1 || !(opt.duration >= 0.0)) {
    throw ConfigError("rates", "control rate, substeps and duration must be positive");
  }
  const Vec goal = opt.goal.size() ? opt.goal : Vec::Zero(m);
  if (goal.size() != m) throw DimensionError("goal must have one entry per unactuated joint");

  const double dt = 1.0 / opt.control_hz;
  const long ticks = std::lround(opt.duration * opt.control_hz);
  const double h = dt / opt.substeps;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  BemTracker true_tracker(dt, opt.bem_cutoff_hz);

  SimTrace tr;
  tr.n = n;
  tr.m = m;
  JointState state(initial.q, initial.qdot);
  Vec prev_qdot = state.qdot;
  controller.reset();

  for (long k = 0; k < ticks; ++k) {
    const double t = static_cast<double>(k) * dt;
    JointState meas(state.q, state.qdot);
    if (opt.encoder_noise > 0.0) {
      for (Eigen::Index i = 0; i < meas.q.size(); ++i) meas.q(i) += opt.encoder_noise * noise(rng);
    }
    meas.qddot = k == 0 ? Vec::Zero(n + m) : Vec((state.qdot - prev_qdot) / dt);
    const TrajectoryPoint ref = reference.at(t);

    ControlOutput out;
    try {
      out = controller.compute(meas, ref);
      if (!out.u.allFinite()) throw Error("controller produced a non-finite input");
    } catch (const BemNotFoundError& e) {
      tr.bem_failed = true;
      tr.diverged = true;
      tr.diverged_time = t;
      tr.message = e.what();
      break;
    } catch (const Error& e) {
      tr.controller_failed = true;
      tr.diverged = true;
      tr.diverged_time = t;
      tr.message = e.what();
      break;
    }
    const Vec u = clamp_torque(out.u, opt.torque_limit);
    const Vec qdd = forward_accel(plant.eval(state), u);

    Vec qe_true = out.qu_e;
    BEMSolution true_sol;
    if (opt.true_bem) {
      const Vec guess = true_tracker.has_previous() ? true_tracker.previous() : Vec::Zero(m);
      try {
        true_sol = solve_bem(plant, state, out.v_ext, guess, opt.bem);
      } catch (const Error&) {
        ++tr.true_bem_failures;
        true_sol.qu_e = true_tracker.has_previous() ? true_tracker.previous() : out.qu_e;
      }
      true_tracker.update(true_sol);
    } else {
      true_sol.qu_e = out.qu_e;
      true_sol.qu_e_dot = out.qu_e_dot;
      true_sol.qu_e_ddot = out.qu_e_ddot;
    }

    tr.t.push_back(t);
    tr.q.push_back(state.q);
    tr.qdot.push_back(state.qdot);
    tr.qddot.push_back(qdd);
    tr.u.push_back(u);
    tr.q_d.push_back(ref.q);
    tr.qdot_d.push_back(ref.qdot);
    tr.qddot_d.push_back(ref.qddot);
    tr.qu_e.push_back(out.qu_e);
    tr.qu_e_dot.push_back(out.qu_e_dot);
    tr.qu_e_ddot.push_back(out.qu_e_ddot);
    tr.e_a.push_back(out.e_a);
    tr.e_u.push_back(out.e_u);
    tr.qu_e_true.push_back(true_sol.qu_e);
    tr.qu_e_true_dot.push_back(true_sol.qu_e_dot);
    tr.qu_e_true_ddot.push_back(true_sol.qu_e_ddot);
    tr.e_u_true.push_back(state.q.tail(m) - true_sol.qu_e);
    tr.v_u_int.push_back(out.v_u_int);
    tr.Sigma_a.push_back(out.Sigma_a);
    tr.Sigma_u.push_back(out.Sigma_u);
    tr.kp1.push_back(out.kp1_diag);
    tr.kd1.push_back(out.kd1_diag);
    tr.kp2.push_back(out.kp2_diag);
    tr.kd2.push_back(out.kd2_diag);
    tr.p_a.push_back(out.p_a);
    tr.sigma.push_back(out.sigma);
    tr.kernel_motion.push_back(out.kernel_motion);

    prev_qdot = state.qdot;
    try {
      for (int s = 0; s < opt.substeps; ++s) state = rk4_step(plant, state, u, h);
    } catch (const Error& e) {
      tr.diverged = true;
      tr.diverged_time = t + dt;
      tr.message = e.what();
      break;
    }
    const bool fell = ((state.q.tail(m) - goal).cwiseAbs().array() > opt.balance_limit).any();
    const bool spun = (state.qdot.cwiseAbs().array() > opt.speed_limit).any();
    if (fell || spun) {
      tr.diverged = true;
      tr.diverged_time = t + dt;
      tr.message = fell ? "balance angle left the admissible band" : "joint speed limit exceeded";
      break;
    }
  }
  return tr;
}

// ---------------------------------------------------------------------------

namespace {

void put_header(std::string& line, const std::string& base, std::size_t count, const char* unit) {
  for (std::size_t i = 0; i < count; ++i) {
    line += "," + base + std::to_string(i + 1) + " [" + unit + "]";
  }
}

void put_values(std::string& line, const Vec& v, std::size_t count) {
  char buf[40];
  for (std::size_t i = 0; i < count; ++i) {
    const double x = i < static_cast<std::size_t>(v.size()) ? v(i) : 0.0;
    std::snprintf(buf, sizeof(buf), ",%.17g", x);
    line += buf;
  }
}

}  // namespace

void SimTrace::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write trace " + path);
  const std::size_t dof = n + m;
  const std::size_t na = n;
  const std::size_t nu = m;
  const std::size_t nsig = sigma.empty() ? 0 : sigma.front().size();
  std::string h = "t [s]";
  put_header(h, "q", dof, "rad");
  put_header(h, "qdot", dof, "rad/s");
  put_header(h, "qddot", dof, "rad/s^2");
  put_header(h, "u", na, "N m");
  put_header(h, "qd", na, "rad");
  put_header(h, "qu_e", nu, "rad");
  put_header(h, "qu_e_true", nu, "rad");
  put_header(h, "e_a", na, "rad");
  put_header(h, "e_u", nu, "rad");
  put_header(h, "e_u_true", nu, "rad");
  put_header(h, "Sigma_a", na, "N^2 m^2");
  put_header(h, "Sigma_u", nu, "N^2 m^2");
  put_header(h, "kp1_", na, "1/s^2");
  put_header(h, "kp2_", nu, "1/s^2");
  put_header(h, "p_a", na, "rad");
  put_header(h, "sigma", nsig, "kg m^2");
  h += ",kernel_motion [rad]\n";
  out << h;
  char buf[40];
  for (std::size_t r = 0; r < t.size(); ++r) {
    std::snprintf(buf, sizeof(buf), "%.17g", t[r]);
    std::string line = buf;
    put_values(line, q[r], dof);
    put_values(line, qdot[r], dof);
    put_values(line, qddot[r], dof);
    put_values(line, u[r], na);
    put_values(line, q_d[r], na);
    put_values(line, qu_e[r], nu);
    put_values(line, qu_e_true[r], nu);
    put_values(line, e_a[r], na);
    put_values(line, e_u[r], nu);
    put_values(line, e_u_true[r], nu);
    put_values(line, Sigma_a[r], na);
    put_values(line, Sigma_u[r], nu);
    put_values(line, kp1[r], na);
    put_values(line, kp2[r], nu);
    put_values(line, p_a[r], na);
    put_values(line, sigma[r], nsig);
    std::snprintf(buf, sizeof(buf), ",%.17g\n", kernel_motion[r]);
    line += buf;
    out << line;
  }
}

// ---------------------------------------------------------------------------

ExcitationData run_excitation(const RobotModel& plant, const ExcitationSpec& spec) {
  const int n = plant.partition().n;
  const int dof = plant.dof();
  if (static_cast<int>(spec.torque.size()) != n) {
    throw ConfigError("excitation.torque", "need one term list per actuated joint");
  }
  if (spec.q_lo.size() != dof || spec.q_hi.size() != dof) {
    throw ConfigError("excitation.q_lo", "joint clamps must have one entry per joint");
  }
  if (spec.init_lo.size() != 2 * dof || spec.init_hi.size() != 2 * dof) {
    throw ConfigError("excitation.init_lo", "initial box must cover q and qdot");
  }
  if (!(spec.control_hz > 0.0) || spec.substeps < 1 || !(spec.episode > 0.0) ||
      spec.target_samples < 1) {
    throw ConfigError("excitation", "rates, episode length and target must be positive");
  }
  const double dt = 1.0 / spec.control_hz;
  const double h = dt / spec.substeps;
  const long budget = std::lround(spec.duration * spec.control_hz);
  const long per_episode = std::max<long>(1, std::lround(spec.episode * spec.control_hz));
  std::size_t n_terms = 0;
  for (const auto& terms : spec.torque) n_terms += terms.size();

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<JointState> states;
  std::vector<Vec> controls;
  ExcitationData data;

  while (static_cast<long>(states.size()) < budget) {
    Vec y(2 * dof);
    for (int i = 0; i < 2 * dof; ++i) {
      y(i) = spec.init_lo(i) + (spec.init_hi(i) - spec.init_lo(i)) * unit(rng);
    }
    std::vector<double> offsets(n_terms);
    for (double& o : offsets) o = kTwoPi * unit(rng);
    JointState s(y.head(dof), y.tail(dof));
    std::vector<JointState> ep_states;
    std::vector<Vec> ep_controls;
    bool truncated = false;
    for (long k = 0; k < per_episode && static_cast<long>(states.size() + ep_states.size()) < budget;
         ++k) {
      const bool outside = (s.q.array() < spec.q_lo.array()).any() ||
                           (s.q.array() > spec.q_hi.array()).any() ||
                           (s.qdot.cwiseAbs().array() > spec.speed_limit).any();
      if (outside) {
        truncated = true;
        break;
      }
      const Vec u = sine_sum(spec.torque, offsets, static_cast<double>(k) * dt);
      JointState logged(s.q, s.qdot, forward_accel(plant.eval(s), u));
      ep_states.push_back(std::move(logged));
      ep_controls.push_back(u);
      try {
        for (int j = 0; j < spec.substeps; ++j) s = rk4_step(plant, s, u, h);
      } catch (const Error&) {
        truncated = true;
        break;
      }
    }
    if (spec.finite_difference_accel && ep_states.size() >= 2) {
      const std::size_t len = ep_states.size();
      std::vector<Vec> fd(len);
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t lo = k == 0 ? 0 : k - 1;
        const std::size_t hi = k + 1 == len ? k : k + 1;
        fd[k] = (ep_states[hi].qdot - ep_states[lo].qdot) / (static_cast<double>(hi - lo) * dt);
      }
      for (std::size_t k = 0; k < len; ++k) ep_states[k].qddot = fd[k];
    }
    ++data.episodes;
    if (truncated) ++data.truncated_episodes;
    if (ep_states.empty()) {
      // The initial draw already violated the clamps.
      if (data.episodes > 1000 * (budget + 1)) break;
      continue;
    }
    states.insert(states.end(), ep_states.begin(), ep_states.end());
    controls.insert(controls.end(), ep_controls.begin(), ep_controls.end());
  }

  data.collected = static_cast<int>(states.size());
  const std::size_t target = std::min<std::size_t>(spec.target_samples, states.size());
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t k = i * states.size() / target;
    data.states.push_back(states[k]);
    data.controls.push_back(controls[k]);
  }
  return data;
}

// ---------------------------------------------------------------------------

std::vector<JointStats> abs_stats(const std::vector<double>& t, const std::vector<Vec>& e,
                                  double window_start) {
  if (t.size() != e.size()) throw DimensionError("time and error columns differ in length");
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r] >= window_start) rows.push_back(r);
  }
  if (rows.empty()) throw Error("empty statistics window");
  const Eigen::Index k = e[rows.front()].size();
  std::vector<JointStats> out(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    double sum = 0.0;
    double mx = 0.0;
    for (std::size_t r : rows) {
      const double a = std::abs(e[r](j));
      sum += a;
      mx = std::max(mx, a);
    }
    const double mean = sum / static_cast<double>(rows.size());
    double var = 0.0;
    for (std::size_t r : rows) {
      const double d = std::abs(e[r](j)) - mean;
      var += d * d;
    }
    out[j].mean = mean;
    out[j].stddev = std::sqrt(var / static_cast<double>(rows.size()));
    out[j].max = mx;
  }
  return out;
}

ErrorStats error_stats(const SimTrace& trace, double window_start, bool true_bem) {
  ErrorStats s;
  s.window_start = window_start;
  s.e_a = abs_stats(trace.t, trace.e_a, window_start);
  s.e_u = abs_stats(trace.t, true_bem ? trace.e_u_true : trace.e_u, window_start);
  for (double t : trace.t) s.rows += t >= window_start ? 1 : 0;
  return s;
}

std::vector<std::pair<double, double>> error_plane(const SimTrace& trace) {
  std::vector<std::pair<double, double>> out;
  out.reserve(trace.size());
  const int n = trace.n;
  const int m = trace.m;
  for (std::size_t r = 0; r < trace.size(); ++r) {
    Vec eq(n + m);
    eq << trace.e_a[r], trace.e_u[r];
    Vec edq(n + m);
    edq << trace.qdot[r].head(n) - trace.qdot_d[r], trace.qdot[r].tail(m) - trace.qu_e_dot[r];
    out.emplace_back(eq.norm(), edq.norm());
  }
  return out;
}

SampleRegion visited_region(const SimTrace& trace, double window_start, int samples) {
  SampleRegion region;
  region.samples = samples;
  for (std::size_t r = 0; r < trace.size(); ++r) {
    if (trace.t[r] < window_start) continue;
    if (region.q_lo.size() == 0) {
      region.q_lo = region.q_hi = trace.q[r];
      region.qdot_lo = region.qdot_hi = trace.qdot[r];
      continue;
    }
    region.q_lo = region.q_lo.cwiseMin(trace.q[r]);
    region.q_hi = region.q_hi.cwiseMax(trace.q[r]);
    region.qdot_lo = region.qdot_lo.cwiseMin(trace.qdot[r]);
    region.qdot_hi = region.qdot_hi.cwiseMax(trace.qdot[r]);
  }
  if (region.q_lo.size() == 0) throw Error("no trace rows in the requested window");
  return region;
}

std::vector<double> error_norms(const SimTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.size());
  for (const auto& [eq, edq] : error_plane(trace)) out.push_back(std::hypot(eq, edq));
  return out;
}

ErrorBoundParams calibrate_bound(const SimTrace& trace, const ErrorBoundParams& params,
                                 double window_start, double d2_max) {
  const int n = trace.n;
  const int m = trace.m;
  if (trace.qu_e_true.size() != trace.size()) throw DimensionError("trace lacks plant BEM columns");
  const double ka = params.kappa_a.size() ? params.kappa_a.norm() : 0.0;
  const double ku = params.kappa_u.size() ? params.kappa_u.norm() : 0.0;
  const double gp_part = params.l_a() * ka + params.l_u() * ku;
  const double dv_gain = 1.0 + params.d_u2 / params.sigma1;

  std::vector<double> e_norm;
  std::vector<double> dv_norm;
  std::vector<double> hot;
  for (std::size_t r = 0; r < trace.size(); ++r) {
    if (trace.t[r] < window_start) continue;
    const Vec qu = trace.q[r].tail(m);
    const Vec qdu = trace.qdot[r].tail(m);
    Vec eq(n + m), edq(n + m), eddq(n + m);
    eq << trace.e_a[r], trace.e_u[r];
    edq << trace.qdot[r].head(n) - trace.qdot_d[r], qdu - trace.qu_e_dot[r];
    eddq << trace.qddot[r].head(n) - trace.qddot_d[r], trace.qddot[r].tail(m) - trace.qu_e_ddot[r];
    const Vec kp = (Vec(n + m) << trace.kp1[r], trace.kp2[r]).finished();
    const Vec kd = (Vec(n + m) << trace.kd1[r], trace.kd2[r]).finished();
    const Vec O = eddq + kp.cwiseProduct(eq) + kd.cwiseProduct(edq);
    const Vec v_true = trace.qu_e_true_ddot[r] -
                       trace.kp2[r].cwiseProduct(qu - trace.qu_e_true[r]) -
                       trace.kd2[r].cwiseProduct(qdu - trace.qu_e_true_dot[r]);
    const double dv = (trace.v_u_int[r] - v_true).norm();
    e_norm.push_back(std::hypot(eq.norm(), edq.norm()));
    dv_norm.push_back(dv);
    hot.push_back(std::max(0.0, O.norm() - gp_part - dv_gain * dv));
  }
  if (e_norm.empty()) throw Error("calibration window holds no rows");
  const AffineEnvelope env_dv = fit_affine_envelope(e_norm, dv_norm, 0.5 * d2_max / (dv_gain - 1.0));
  const AffineEnvelope env_hot = fit_affine_envelope(e_norm, hot, 0.5 * d2_max);
  ErrorBoundParams out = params;
  out.c1 = env_hot.slope;
  out.c2 = env_hot.offset;
  out.c3 = env_dv.slope;
  out.c4 = env_dv.offset;
  return out;
}

}  // namespace balance
