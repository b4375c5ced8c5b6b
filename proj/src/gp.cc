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

#include "balance/gp.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "balance/errors.h"

namespace balance {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kJitterStart = 1e-8;
constexpr double kJitterMax = 1e-2;

// Unit-amplitude ARD kernel matrix exp(-1/2 (xi-xj)^T W (xi-xj)).
Mat unit_kernel_matrix(const Mat& X, const Vec& W) {
  const Eigen::Index n = X.rows();
  const Mat Z = X * W.cwiseSqrt().asDiagonal();
  const Vec sq = Z.rowwise().squaredNorm();
  Mat E(n, n);
  E.noalias() = -2.0 * Z * Z.transpose();
  E.colwise() += sq;
  E.rowwise() += sq.transpose();
  E = (-0.5 * E.array().max(0.0)).exp().matrix();
  E.diagonal().setOnes();
  return E;
}

struct Factorization {
  Eigen::LLT<Mat> llt;
  double jitter = 0.0;  // absolute, added to the diagonal
  double rel_jitter = 0.0;
};

// K = sigma_f^2 E + (vartheta^2 + jitter) I, escalating jitter by 10x from
// 1e-8 to 1e-2 of the mean diagonal until the Cholesky factorization holds.
Factorization factorize(const Mat& E, const Hyperparams& h) {
  const double sf2 = h.sigma_f * h.sigma_f;
  const double vt2 = h.vartheta * h.vartheta;
  const double mean_diag = sf2 + vt2;
  Factorization f;
  for (double rel = kJitterStart; rel <= kJitterMax * (1 + 1e-9); rel *= 10.0) {
    Mat K = sf2 * E;
    const double jitter = rel * mean_diag;
    K.diagonal().array() += vt2 + jitter;
    f.llt.compute(K);
    if (f.llt.info() == Eigen::Success) {
      f.jitter = jitter;
      f.rel_jitter = rel;
      return f;
    }
  }
  throw TrainingError("Cholesky factorization failed after jitter escalation to 1e-2");
}

double stddev(const Vec& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size()));
}

}  // namespace

void Hyperparams::validate(int input_dim) const {
  if (W.size() != input_dim) {
    throw DimensionError("hyperparameter W has length " + std::to_string(W.size()) +
                         ", expected " + std::to_string(input_dim));
  }
  if (!((W.array() > 0.0).all()) || !(sigma_f > 0.0) || !(vartheta >= 0.0) || !W.allFinite() ||
      !std::isfinite(sigma_f) || !std::isfinite(vartheta)) {
    throw TrainingError("hyperparameters must satisfy W > 0, sigma_f > 0, vartheta >= 0");
  }
}

double kernel_eval(const Vec& x1, const Vec& x2, const Hyperparams& hyper, bool same_index) {
  const double r2 = ((x1 - x2).array().square() * hyper.W.array()).sum();
  double k = hyper.sigma_f * hyper.sigma_f * std::exp(-0.5 * r2);
  if (same_index) k += hyper.vartheta * hyper.vartheta;
  return k;
}

namespace {

// Factorized state at one hyperparameter point; X is centred (the kernel is
// translation invariant and centring keeps the distance sums well
// conditioned).
struct NlmlWork {
  Mat E;
  Factorization f;
  Vec alpha;
  double value = 0.0;
};

NlmlWork nlml_work(const Mat& X, const Vec& Y, const Hyperparams& hyper) {
  NlmlWork w;
  w.E = unit_kernel_matrix(X, hyper.W);
  w.f = factorize(w.E, hyper);
  w.alpha = w.f.llt.solve(Y);
  const double log_det_half = w.f.llt.matrixLLT().diagonal().array().log().sum();
  w.value = 0.5 * Y.dot(w.alpha) + log_det_half + 0.5 * static_cast<double>(Y.size()) * kLog2Pi;
  return w;
}

// dNLML/dtheta = 1/2 tr((K^-1 - alpha alpha^T) dK/dtheta)
Vec nlml_gradient(const Mat& X, const NlmlWork& w, const Hyperparams& hyper) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  Mat M = w.f.llt.solve(Mat::Identity(n, n));
  M.noalias() -= w.alpha * w.alpha.transpose();
  const double sf2 = hyper.sigma_f * hyper.sigma_f;
  const double vt2 = hyper.vartheta * hyper.vartheta;
  const Mat S = (M.array() * w.E.array()).matrix() * sf2;
  Vec grad(d + 2);
  const Vec row_sums = S.rowwise().sum();
  const Mat SX = S * X;
  for (Eigen::Index k = 0; k < d; ++k) {
    // sum_ij S_ij (x_ik - x_jk)^2 for symmetric S
    const double weighted =
        2.0 * X.col(k).array().square().matrix().dot(row_sums) - 2.0 * X.col(k).dot(SX.col(k));
    grad(k) = -0.25 * hyper.W(k) * weighted;
  }
  // The jitter scales with sigma_f^2 + vartheta^2 and is differentiated too.
  const double tr_m = M.trace();
  grad(d) = 0.5 * (2.0 * S.sum() + 2.0 * sf2 * w.f.rel_jitter * tr_m);
  grad(d + 1) = 0.5 * 2.0 * vt2 * (1.0 + w.f.rel_jitter) * tr_m;
  return grad;
}

Mat centred(const Mat& X) { return X.rowwise() - X.colwise().mean(); }

}  // namespace

NlmlResult nlml(const Mat& X_in, const Vec& Y, const Hyperparams& hyper) {
  hyper.validate(static_cast<int>(X_in.cols()));
  if (Y.size() != X_in.rows()) throw DimensionError("X and Y disagree on sample count");
  const Mat X = centred(X_in);
  const NlmlWork w = nlml_work(X, Y, hyper);
  NlmlResult r;
  r.value = w.value;
  r.grad = nlml_gradient(X, w, hyper);
  return r;
}

// ---------------------------------------------------------------------------

GpChannel GpChannel::fit(Mat X, Vec Y, Hyperparams hyper) {
  if (X.rows() != Y.size()) throw DimensionError("X and Y disagree on sample count");
  hyper.validate(static_cast<int>(X.cols()));
  GpChannel ch;
  ch.X_ = std::move(X);
  ch.Y_ = std::move(Y);
  ch.hyper_ = std::move(hyper);
  if (ch.Y_.size() > 0) {
    if (!ch.Y_.allFinite() || !ch.X_.allFinite()) throw TrainingError("training data not finite");
    const Mat E = unit_kernel_matrix(centred(ch.X_), ch.hyper_.W);
    Factorization f = factorize(E, ch.hyper_);
    ch.chol_ = std::move(f.llt);
    ch.jitter_ = f.jitter;
    ch.alpha_ = ch.chol_.solve(ch.Y_);
  }
  return ch;
}

GpChannel GpChannel::restore(Mat X, Vec Y, Hyperparams hyper, double jitter, Vec alpha) {
  if (X.rows() != Y.size() || alpha.size() != Y.size()) {
    throw DimensionError("stored GP channel has inconsistent sizes");
  }
  hyper.validate(static_cast<int>(X.cols()));
  GpChannel ch;
  ch.X_ = std::move(X);
  ch.Y_ = std::move(Y);
  ch.hyper_ = std::move(hyper);
  ch.jitter_ = jitter;
  ch.alpha_ = std::move(alpha);
  if (ch.Y_.size() > 0) {
    const double sf2 = ch.hyper_.sigma_f * ch.hyper_.sigma_f;
    Mat K = sf2 * unit_kernel_matrix(centred(ch.X_), ch.hyper_.W);
    K.diagonal().array() += ch.hyper_.vartheta * ch.hyper_.vartheta + jitter;
    ch.chol_.compute(K);
    if (ch.chol_.info() != Eigen::Success) throw TrainingError("stored GP channel is not SPD");
  }
  return ch;
}

Vec GpChannel::kernel_vector(const Vec& x) const {
  const double sf2 = hyper_.sigma_f * hyper_.sigma_f;
  const Eigen::ArrayXd r2 =
      ((X_.rowwise() - x.transpose()).array().square().rowwise() * hyper_.W.transpose().array())
          .rowwise()
          .sum();
  return (sf2 * (-0.5 * r2).exp()).matrix();
}

double GpChannel::mean(const Vec& x) const {
  if (x.size() != X_.cols()) throw DimensionError("GP query has wrong input dimension");
  if (Y_.size() == 0) return 0.0;
  return kernel_vector(x).dot(alpha_);
}

std::pair<double, double> GpChannel::predict(const Vec& x) const {
  if (x.size() != X_.cols()) throw DimensionError("GP query has wrong input dimension");
  const double sf2 = hyper_.sigma_f * hyper_.sigma_f;
  if (Y_.size() == 0) return {0.0, sf2};
  const Vec k = kernel_vector(x);
  const double mu = k.dot(alpha_);
  const Vec v = chol_.matrixL().solve(k);
  double var = sf2 - v.squaredNorm();
  if (var < 0.0) {
    clamp_count_->fetch_add(1, std::memory_order_relaxed);
    var = 0.0;
  }
  return {mu, var};
}

double GpChannel::nlml_value() const {
  const Eigen::Index n = Y_.size();
  if (n == 0) return 0.0;
  const Mat L = chol_.matrixL();
  return 0.5 * Y_.dot(alpha_) + L.diagonal().array().log().sum() + 0.5 * n * kLog2Pi;
}

double GpChannel::rkhs_norm() const {
  if (Y_.size() == 0) return 0.0;
  return std::sqrt(std::max(0.0, Y_.dot(alpha_)));
}

// ---------------------------------------------------------------------------

Hyperparams default_hyperparams(const Mat& X, const Vec& Y) {
  Hyperparams h;
  h.W.resize(X.cols());
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    const double s = stddev(X.col(k));
    h.W(k) = 1.0 / std::max(s * s, 1e-8);
  }
  const double sy = std::max(stddev(Y), 1e-6);
  h.sigma_f = sy;
  h.vartheta = 0.1 * sy;
  return h;
}

namespace {

Vec to_theta(const Hyperparams& h) {
  Vec t(h.W.size() + 2);
  t.head(h.W.size()) = h.W.array().log().matrix();
  t(h.W.size()) = std::log(h.sigma_f);
  t(h.W.size() + 1) = std::log(h.vartheta);
  return t;
}

Hyperparams from_theta(const Vec& t) {
  const Eigen::Index d = t.size() - 2;
  Hyperparams h;
  h.W = t.head(d).array().exp().matrix();
  h.sigma_f = std::exp(t(d));
  h.vartheta = std::exp(t(d + 1));
  return h;
}

struct Box {
  Vec lo;
  Vec hi;
  Vec clamp(const Vec& t) const { return t.cwiseMax(lo).cwiseMin(hi); }
};

// Non-finite values and factorization failures map to +inf.
double safe_value(const Mat& X, const Vec& Y, const Vec& theta, NlmlWork* work) {
  try {
    *work = nlml_work(X, Y, from_theta(theta));
    return std::isfinite(work->value) ? work->value : std::numeric_limits<double>::infinity();
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

bool safe_gradient(const Mat& X, const NlmlWork& work, const Vec& theta, Vec* grad) {
  *grad = nlml_gradient(X, work, from_theta(theta));
  return grad->allFinite();
}

struct DescentResult {
  Vec theta;
  double value;
  int iterations;
};

// Projected gradient descent with Barzilai-Borwein trial steps and Armijo
// backtracking. X must be centred.
DescentResult descend(const Mat& X, const Vec& Y, Vec theta, const Box& box,
                      const TrainOptions& opts) {
  NlmlWork work;
  Vec g;
  double f = safe_value(X, Y, theta, &work);
  DescentResult out{theta, f, 0};
  if (!std::isfinite(f) || !safe_gradient(X, work, theta, &g)) {
    out.value = std::numeric_limits<double>::infinity();
    return out;
  }
  double step = 0.5 / std::max(1.0, g.cwiseAbs().maxCoeff());
  Vec prev_theta;
  Vec prev_g;
  std::vector<double> history{f};
  int it = 0;
  for (; it < opts.max_iters; ++it) {
    const Vec pg = theta - box.clamp(theta - g);
    if (pg.cwiseAbs().maxCoeff() < opts.grad_tol) break;
    if (it > 0) {
      const Vec s = theta - prev_theta;
      const Vec yv = g - prev_g;
      const double sy = s.dot(yv);
      if (sy > 1e-16) step = std::clamp(s.squaredNorm() / sy, 1e-8, 1e3);
      else step = std::min(step * 2.0, 1e3);
    }
    bool accepted = false;
    Vec trial;
    double f_trial = 0.0;
    for (int bt = 0; bt < 40; ++bt) {
      trial = box.clamp(theta - step * g);
      f_trial = safe_value(X, Y, trial, &work);
      if (std::isfinite(f_trial) && f_trial <= f + 1e-4 * g.dot(trial - theta)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    Vec g_trial;
    if (!accepted || !safe_gradient(X, work, trial, &g_trial)) break;
    prev_theta = theta;
    prev_g = g;
    theta = trial;
    f = f_trial;
    g = g_trial;
    history.push_back(f);
    // Stalled when the last `stall_window` steps gained less than rel_tol.
    const std::size_t w = static_cast<std::size_t>(std::max(1, opts.stall_window));
    if (history.size() > w &&
        history[history.size() - 1 - w] - f < opts.rel_tol * std::max(1.0, std::abs(f))) {
      ++it;
      break;
    }
  }
  out.theta = theta;
  out.value = f;
  out.iterations = it;
  return out;
}

}  // namespace

GpChannel train_channel(const Mat& X, const Vec& Y, const Hyperparams& init,
                        const TrainOptions& opts, TrainReport* report) {
  if (Y.size() < 2) throw TrainingError("training requires at least two samples");
  if (X.rows() != Y.size()) throw DimensionError("X and Y disagree on sample count");
  if (!Y.allFinite() || !X.allFinite()) throw TrainingError("training data not finite");
  init.validate(static_cast<int>(X.cols()));

  const double sy = std::max(stddev(Y), 1e-6);
  Hyperparams start = init;
  start.vartheta = std::max(start.vartheta, opts.min_noise_ratio * sy);
  const Vec theta0 = to_theta(start);
  const Eigen::Index d = X.cols();
  Box box;
  box.lo = theta0.array() - 12.0;
  box.hi = theta0.array() + 12.0;
  box.lo(d + 1) = std::log(opts.min_noise_ratio * sy);
  box.hi(d + 1) = std::max(std::log(sy) + 5.0, box.lo(d + 1) + 1.0);

  const Mat Xc = centred(X);
  NlmlWork scratch;
  const double f_init = safe_value(Xc, Y, to_theta(init), &scratch);
  DescentResult best = descend(Xc, Y, box.clamp(theta0), box, opts);
  int total_iters = best.iterations;
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int r = 0; r < opts.restarts; ++r) {
    Vec t = theta0;
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) += opts.restart_spread * normal(rng);
    DescentResult cand = descend(Xc, Y, box.clamp(t), box, opts);
    total_iters += cand.iterations;
    if (cand.value < best.value) best = cand;
  }

  Hyperparams chosen = from_theta(best.theta);
  if (!(best.value <= f_init)) {
    if (!std::isfinite(f_init)) throw TrainingError("NLML is not finite at any explored point");
    chosen = init;
    best.value = f_init;
  }
  if (report) {
    report->nlml_init = f_init;
    report->nlml_final = best.value;
    report->iterations = total_iters;
  }
  return GpChannel::fit(X, Y, chosen);
}

// ---------------------------------------------------------------------------

Vec InputSpec::assemble(const JointState& state) const {
  const int dof = state.dof();
  Vec x(input_dim(dof));
  int at = 0;
  if (q) {
    x.segment(at, dof) = state.q;
    at += dof;
  }
  if (qdot) {
    x.segment(at, dof) = state.qdot;
    at += dof;
  }
  if (qddot) {
    if (state.qddot) x.segment(at, dof) = *state.qddot;
    else x.segment(at, dof).setZero();
  }
  return x;
}

std::string InputSpec::to_string() const {
  std::string s;
  auto add = [&s](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += name;
  };
  add(q, "q");
  add(qdot, "qdot");
  add(qddot, "qddot");
  return s;
}

InputSpec InputSpec::parse(const std::string& s) {
  InputSpec spec{false, false, false};
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "q") spec.q = true;
    else if (item == "qdot") spec.qdot = true;
    else if (item == "qddot") spec.qddot = true;
    else throw ConfigError("gp.input_spec", "unknown input component '" + item + "'");
  }
  if (!spec.q && !spec.qdot && !spec.qddot) {
    throw ConfigError("gp.input_spec", "at least one input component is required");
  }
  return spec;
}

GpVectorModel::GpVectorModel(InputSpec spec, int dof, std::vector<GpChannel> channels)
    : spec_(spec), dof_(dof), channels_(std::move(channels)) {
  const int dim = spec_.input_dim(dof_);
  for (const auto& ch : channels_) {
    if (ch.X().cols() != dim) throw DimensionError("GP channel input dimension mismatch");
  }
}

Prediction GpVectorModel::predict(const Vec& x) const {
  if (!trained()) throw TrainingError("GP model is not trained");
  Prediction p;
  p.mu.resize(outputs());
  p.Sigma.resize(outputs());
  for (int i = 0; i < outputs(); ++i) {
    auto [mu, var] = channels_[i].predict(x);
    p.mu(i) = mu;
    p.Sigma(i) = var;
  }
  return p;
}

Vec GpVectorModel::mean(const Vec& x) const {
  if (!trained()) throw TrainingError("GP model is not trained");
  Vec mu(outputs());
  for (int i = 0; i < outputs(); ++i) mu(i) = channels_[i].mean(x);
  return mu;
}

Prediction predict(const GpVectorModel& model, const Vec& x) { return model.predict(x); }

double variance_sup(const GpVectorModel& model) {
  if (!model.trained()) throw TrainingError("GP model is not trained");
  double best = 0.0;
  for (const auto& ch : model.channels()) {
    const auto& h = ch.hyper();
    best = std::max(best, std::sqrt(h.sigma_f * h.sigma_f + h.vartheta * h.vartheta));
  }
  return best;
}

BoundConstants compute_bound(const GpVectorModel& model, double eta,
                             const std::optional<Vec>& rkhs_override) {
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("gp.eta", "confidence must lie in (0, 1)");
  if (!model.trained()) throw TrainingError("GP model is not trained");
  const int nch = model.outputs();
  if (rkhs_override && rkhs_override->size() != nch) {
    throw DimensionError("RKHS norm override needs one entry per channel");
  }
  BoundConstants b;
  b.eta = eta;
  b.rkhs_norm_est.resize(nch);
  b.varsigma.resize(nch);
  b.kappa.resize(nch);
  const double root = std::pow(eta, 1.0 / nch);
  for (int i = 0; i < nch; ++i) {
    const GpChannel& ch = model.channels()[i];
    const Hyperparams& h = ch.hyper();
    const double vt2 = h.vartheta * h.vartheta;
    double vs = 0.0;
    const Mat& X = ch.X();
    for (Eigen::Index a = 0; a < X.rows(); ++a) {
      for (Eigen::Index c = a; c < X.rows(); ++c) {
        const double k = kernel_eval(X.row(a).transpose(), X.row(c).transpose(), h, false);
        vs = std::max(vs, 0.5 * std::log(std::abs(1.0 + k / vt2)));
      }
    }
    const double B = rkhs_override ? (*rkhs_override)(i) : ch.rkhs_norm();
    const double lg = std::log((ch.size() + 1.0) / (1.0 - root));
    b.rkhs_norm_est(i) = B;
    b.varsigma(i) = vs;
    b.kappa(i) = std::sqrt(2.0 * B * B + 300.0 * vs * lg * lg * lg);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

using nlohmann::json;

json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Vec json_vec(const json& j) {
  std::vector<double> v = j.get<std::vector<double>>();
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json model_json(const GpVectorModel& model) {
  json j;
  j["input_spec"] = model.input_spec().to_string();
  j["dof"] = model.dof();
  j["channels"] = json::array();
  for (const auto& ch : model.channels()) {
    json c;
    c["W"] = vec_json(ch.hyper().W);
    c["sigma_f"] = ch.hyper().sigma_f;
    c["vartheta"] = ch.hyper().vartheta;
    c["jitter"] = ch.jitter();
    json rows = json::array();
    for (Eigen::Index r = 0; r < ch.X().rows(); ++r) rows.push_back(vec_json(ch.X().row(r)));
    c["X"] = rows;
    c["Y"] = vec_json(ch.Y());
    c["alpha"] = vec_json(ch.alpha());
    j["channels"].push_back(c);
  }
  return j;
}

GpVectorModel json_model(const json& j) {
  const InputSpec spec = InputSpec::parse(j.at("input_spec").get<std::string>());
  const int dof = j.at("dof").get<int>();
  const int dim = spec.input_dim(dof);
  std::vector<GpChannel> channels;
  for (const auto& c : j.at("channels")) {
    Hyperparams h;
    h.W = json_vec(c.at("W"));
    h.sigma_f = c.at("sigma_f").get<double>();
    h.vartheta = c.at("vartheta").get<double>();
    const auto& rows = c.at("X");
    Mat X(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t r = 0; r < rows.size(); ++r) X.row(r) = json_vec(rows[r]).transpose();
    channels.push_back(GpChannel::restore(std::move(X), json_vec(c.at("Y")), std::move(h),
                                          c.at("jitter").get<double>(), json_vec(c.at("alpha"))));
  }
  return GpVectorModel(spec, dof, std::move(channels));
}

}  // namespace

std::string model_to_json(const GpVectorModel& model) { return model_json(model).dump(); }

GpVectorModel model_from_json(const std::string& text) { return json_model(json::parse(text)); }

void save_model(const std::string& path, const GpVectorModel& a, const GpVectorModel& u) {
  json j;
  j["format"] = "balance-gp-model";
  j["version"] = 1;
  j["gp_a"] = model_json(a);
  j["gp_u"] = model_json(u);
  std::ofstream out(path);
  if (!out) throw Error("cannot write model file " + path);
  out << j.dump(1) << "\n";
}

std::pair<GpVectorModel, GpVectorModel> load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read model file " + path);
  json j;
  try {
    j = json::parse(in);
    if (j.at("format").get<std::string>() != "balance-gp-model") {
      throw Error("not a GP model file: " + path);
    }
    return {json_model(j.at("gp_a")), json_model(j.at("gp_u"))};
  } catch (const json::exception& e) {
    throw Error("malformed model file " + path + ": " + e.what());
  }
}

}  // namespace balance
