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

// Gaussian process regression with an ARD squared-exponential kernel
//
//   k(x, x') = sigma_f^2 exp(-1/2 (x - x')^T W (x - x')) + vartheta^2 [same index]
//
// One GpChannel per scalar output; a GpVectorModel stacks channels that
// share their training inputs.

#ifndef BALANCE_GP_H_
#define BALANCE_GP_H_

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "balance/dynamics.h"

namespace balance {

struct Hyperparams {
  Vec W;                 // ARD weights, one per input dimension (> 0)
  double sigma_f = 1.0;  // signal scale (> 0)
  double vartheta = 0.1; // noise scale (>= 0)

  void validate(int input_dim) const;
};

double kernel_eval(const Vec& x1, const Vec& x2, const Hyperparams& hyper, bool same_index);

// Negative log marginal likelihood
//   1/2 Y^T K^-1 Y + 1/2 log det K + N/2 log(2 pi)
// and its gradient with respect to the log-parameters
// [log W_1 .. log W_d, log sigma_f, log vartheta].
struct NlmlResult {
  double value = 0.0;
  Vec grad;
};
NlmlResult nlml(const Mat& X, const Vec& Y, const Hyperparams& hyper);

struct TrainOptions {
  int restarts = 4;  // random restarts in addition to the initial guess
  int max_iters = 200;
  double grad_tol = 1e-6;
  // A descent stops once `stall_window` accepted steps together lower the
  // NLML by less than rel_tol * max(1, |NLML|).
  double rel_tol = 1e-6;
  int stall_window = 10;
  double restart_spread = 1.0;  // std-dev of log-parameter perturbations
  // Lower bound on vartheta relative to std(Y); keeps K well conditioned.
  double min_noise_ratio = 1e-3;
  std::uint64_t seed = 1;
};

class GpChannel {
 public:
  GpChannel() = default;

  // Factorizes K for fixed hyperparameters. N may be zero (prior only).
  static GpChannel fit(Mat X, Vec Y, Hyperparams hyper);

  double mean(const Vec& x) const;
  // Returns {mean, variance}; variance is the latent-function variance
  // (no observation noise), clamped at zero.
  std::pair<double, double> predict(const Vec& x) const;

  double nlml_value() const;
  // sqrt(Y^T K^-1 Y), the RKHS norm of the posterior mean.
  double rkhs_norm() const;

  const Mat& X() const { return X_; }
  const Vec& Y() const { return Y_; }
  const Hyperparams& hyper() const { return hyper_; }
  const Vec& alpha() const { return alpha_; }
  double jitter() const { return jitter_; }
  int size() const { return static_cast<int>(Y_.size()); }
  std::size_t clamp_count() const { return clamp_count_->load(); }

  // Rebuild from persisted fields; alpha is taken as stored.
  static GpChannel restore(Mat X, Vec Y, Hyperparams hyper, double jitter, Vec alpha);

 private:
  Vec kernel_vector(const Vec& x) const;

  Mat X_;
  Vec Y_;
  Hyperparams hyper_;
  Eigen::LLT<Mat> chol_;
  Vec alpha_;
  double jitter_ = 0.0;
  std::shared_ptr<std::atomic<std::size_t>> clamp_count_ =
      std::make_shared<std::atomic<std::size_t>>(0);
};

struct TrainReport {
  double nlml_init = 0.0;
  double nlml_final = 0.0;
  int iterations = 0;
};

// Optimizes log-hyperparameters by gradient descent with backtracking line
// search from `init` plus `opts.restarts` random restarts. Never returns a
// channel with higher NLML than `init`.
GpChannel train_channel(const Mat& X, const Vec& Y, const Hyperparams& init,
                        const TrainOptions& opts, TrainReport* report = nullptr);

// Data-driven starting point: W_d = 1 / var(X_d), sigma_f = std(Y),
// vartheta = 0.1 std(Y).
Hyperparams default_hyperparams(const Mat& X, const Vec& Y);

// Which parts of the joint state form the GP input, in this order.
struct InputSpec {
  bool q = true;
  bool qdot = true;
  bool qddot = true;

  int input_dim(int dof) const { return dof * ((q ? 1 : 0) + (qdot ? 1 : 0) + (qddot ? 1 : 0)); }
  // A missing qddot is treated as zero.
  Vec assemble(const JointState& state) const;
  std::string to_string() const;
  static InputSpec parse(const std::string& s);
};

struct Prediction {
  Vec mu;
  Vec Sigma;
};

class GpVectorModel {
 public:
  GpVectorModel() = default;
  GpVectorModel(InputSpec spec, int dof, std::vector<GpChannel> channels);

  bool trained() const { return !channels_.empty(); }
  int outputs() const { return static_cast<int>(channels_.size()); }
  int dof() const { return dof_; }
  const InputSpec& input_spec() const { return spec_; }
  const std::vector<GpChannel>& channels() const { return channels_; }

  // Prediction at an already-assembled input vector.
  Prediction predict(const Vec& x) const;
  Vec mean(const Vec& x) const;
  Prediction predict(const JointState& state) const { return predict(spec_.assemble(state)); }

 private:
  InputSpec spec_;
  int dof_ = 0;
  std::vector<GpChannel> channels_;
};

Prediction predict(const GpVectorModel& model, const Vec& x);

// max_i sqrt(sigma_f,i^2 + vartheta_i^2).
double variance_sup(const GpVectorModel& model);

struct BoundConstants {
  double eta = 0.9;
  Vec rkhs_norm_est;
  Vec varsigma;
  Vec kappa;
};

// High-probability error-bound constants per channel:
//   varsigma_i = max_{x,x' in X} 1/2 ln|1 + vartheta_i^-2 k_i(x, x')|
//   kappa_i    = sqrt(2 B_i^2 + 300 varsigma_i ln^3((N+1) / (1 - eta^(1/n))))
// with B_i the RKHS-norm estimate (override per channel when given) and n
// the number of channels in the model.
BoundConstants compute_bound(const GpVectorModel& model, double eta,
                             const std::optional<Vec>& rkhs_override = std::nullopt);

// Persistence as a JSON document; doubles round-trip exactly.
void save_model(const std::string& path, const GpVectorModel& a, const GpVectorModel& u);
std::pair<GpVectorModel, GpVectorModel> load_model(const std::string& path);
std::string model_to_json(const GpVectorModel& model);
GpVectorModel model_from_json(const std::string& text);

}  // namespace balance

#endif  // BALANCE_GP_H_
