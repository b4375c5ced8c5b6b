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

#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "balance/errors.h"
#include "balance/gp.h"

namespace balance {
namespace {

Hyperparams make_hyper(Vec W, double sf, double vt) {
  Hyperparams h;
  h.W = std::move(W);
  h.sigma_f = sf;
  h.vartheta = vt;
  return h;
}

Mat random_inputs(std::mt19937_64& rng, int rows, int cols, double range = 2.0) {
  std::uniform_real_distribution<double> u(-range, range);
  Mat X(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) X(i, j) = u(rng);
  return X;
}

Vec smooth_target(const Mat& X) {
  Vec y(X.rows());
  for (int i = 0; i < X.rows(); ++i) y(i) = std::sin(1.3 * X(i, 0)) + 0.5 * std::cos(X.row(i).sum());
  return y;
}

// Dense reference NLML with the same jitter rule, written from the formula.
double reference_nlml(const Mat& X, const Vec& Y, const Hyperparams& h) {
  const Eigen::Index n = X.rows();
  Mat K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vec d = X.row(i) - X.row(j);
      K(i, j) = h.sigma_f * h.sigma_f * std::exp(-0.5 * d.dot(h.W.asDiagonal() * d));
    }
  K.diagonal().array() += h.vartheta * h.vartheta;
  K.diagonal().array() += 1e-8 * K.diagonal().mean();
  Eigen::LDLT<Mat> ldlt(K);
  const double logdet = ldlt.vectorD().array().log().sum();
  return 0.5 * Y.dot(ldlt.solve(Y)) + 0.5 * logdet + 0.5 * n * std::log(2 * M_PI);
}

TEST(KernelTest, ZeroDistanceAddsNoiseOnSameIndex) {
  const Hyperparams h = make_hyper(Vec::Constant(3, 0.7), 1.5, 0.2);
  const Vec x = Vec::LinSpaced(3, -1, 1);
  EXPECT_NEAR(kernel_eval(x, x, h, true), 1.5 * 1.5 + 0.2 * 0.2, 1e-15);
  EXPECT_NEAR(kernel_eval(x, x, h, false), 1.5 * 1.5, 1e-15);
}

TEST(KernelTest, UnitDistanceIdentityWeights) {
  const Hyperparams h = make_hyper(Vec::Ones(2), 1.0, 0.0);
  EXPECT_NEAR(kernel_eval(Vec::Zero(2), Vec::Unit(2, 1), h, false), 0.60653065971263342, 1e-15);
}

TEST(KernelTest, DecaysMonotonicallyWithDistance) {
  const Hyperparams h = make_hyper(Vec::Ones(2), 2.0, 0.5);
  double prev = kernel_eval(Vec::Zero(2), Vec::Zero(2), h, false);
  for (double r = 0.5; r < 20; r += 0.5) {
    const double k = kernel_eval(Vec::Zero(2), Vec::Constant(2, r), h, false);
    EXPECT_LT(k, prev);
    prev = k;
  }
  EXPECT_LT(prev, 1e-100);
}

TEST(HyperparamsTest, ValidationRejectsBadValues) {
  EXPECT_THROW(make_hyper(Vec::Ones(2), 1.0, 0.1).validate(3), DimensionError);
  EXPECT_ANY_THROW(make_hyper(Vec::Zero(2), 1.0, 0.1).validate(2));
  EXPECT_ANY_THROW(make_hyper(Vec::Ones(2), 0.0, 0.1).validate(2));
  EXPECT_ANY_THROW(make_hyper(Vec::Ones(2), 1.0, -0.1).validate(2));
}

TEST(NlmlTest, ValueMatchesDenseReference) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 5; ++k) {
    const Mat X = random_inputs(rng, 25, 3);
    const Vec Y = smooth_target(X);
    const Hyperparams h = make_hyper(Vec::Constant(3, 0.3 + k * 0.2), 0.8 + 0.1 * k, 0.05 + 0.02 * k);
    EXPECT_NEAR(nlml(X, Y, h).value, reference_nlml(X, Y, h), 1e-8);
  }
}

TEST(NlmlTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> logu(-1.5, 1.0);
  for (int k = 0; k < 10; ++k) {
    const int d = 2 + k % 3;
    const Mat X = random_inputs(rng, 30, d);
    const Vec Y = smooth_target(X);
    Vec theta(d + 2);
    for (int i = 0; i < d + 2; ++i) theta(i) = logu(rng);
    theta(d + 1) = -2.0 + 0.1 * k;
    auto hyper_at = [&](const Vec& t) {
      return make_hyper(t.head(d).array().exp().matrix(), std::exp(t(d)), std::exp(t(d + 1)));
    };
    const Vec g = nlml(X, Y, hyper_at(theta)).grad;
    const double step = 1e-5;
    Vec fd(d + 2);
    for (int i = 0; i < d + 2; ++i) {
      Vec a = theta, b = theta;
      a(i) += step;
      b(i) -= step;
      fd(i) = (nlml(X, Y, hyper_at(a)).value - nlml(X, Y, hyper_at(b)).value) / (2 * step);
    }
    EXPECT_LT((g - fd).norm() / std::max(1.0, fd.norm()), 1e-4) << "instance " << k;
  }
}

TEST(TrainTest, NeverWorseThanInitialAndDeterministic) {
  std::mt19937_64 rng(3);
  const Mat X = random_inputs(rng, 60, 2);
  const Vec Y = smooth_target(X);
  const Hyperparams init = default_hyperparams(X, Y);
  TrainOptions opts;
  opts.seed = 42;
  TrainReport r1, r2;
  const GpChannel a = train_channel(X, Y, init, opts, &r1);
  const GpChannel b = train_channel(X, Y, init, opts, &r2);
  EXPECT_LE(r1.nlml_final, r1.nlml_init);
  EXPECT_EQ(a.hyper().W, b.hyper().W);
  EXPECT_EQ(a.hyper().sigma_f, b.hyper().sigma_f);
  EXPECT_EQ(a.hyper().vartheta, b.hyper().vartheta);
  EXPECT_EQ(r1.nlml_final, r2.nlml_final);
}

TEST(TrainTest, MatchesGeneratingHyperparameters) {
  // Draw Y from a known GP and compare the optimum with the truth.
  std::mt19937_64 rng(9);
  const Mat X = random_inputs(rng, 80, 2);
  const Hyperparams truth = make_hyper(Vec::Constant(2, 1.5), 1.2, 0.1);
  Mat K(80, 80);
  for (int i = 0; i < 80; ++i)
    for (int j = 0; j < 80; ++j)
      K(i, j) = kernel_eval(X.row(i).transpose(), X.row(j).transpose(), truth, i == j);
  Eigen::LLT<Mat> llt(K);
  std::normal_distribution<double> normal;
  Vec z(80);
  for (int i = 0; i < 80; ++i) z(i) = normal(rng);
  const Vec Y = llt.matrixL() * z;
  TrainReport rep;
  train_channel(X, Y, default_hyperparams(X, Y), TrainOptions{}, &rep);
  EXPECT_LE(rep.nlml_final, nlml(X, Y, truth).value + 1e-6);
}

TEST(TrainTest, ZeroTargetsGiveZeroMean) {
  std::mt19937_64 rng(4);
  const Mat X = random_inputs(rng, 20, 2);
  const Vec Y = Vec::Zero(20);
  const GpChannel ch = train_channel(X, Y, default_hyperparams(X, Y), TrainOptions{});
  const double bound = ch.hyper().sigma_f * ch.hyper().sigma_f + ch.hyper().vartheta * ch.hyper().vartheta;
  const Mat Q = random_inputs(rng, 100, 2, 4.0);
  for (int i = 0; i < Q.rows(); ++i) {
    auto [mu, var] = ch.predict(Q.row(i).transpose());
    EXPECT_EQ(mu, 0.0);
    EXPECT_LE(var, bound);
  }
}

TEST(TrainTest, RejectsTooFewOrNonFiniteSamples) {
  const Hyperparams h = make_hyper(Vec::Ones(1), 1, 0.1);
  EXPECT_THROW(train_channel(Mat::Zero(1, 1), Vec::Zero(1), h, TrainOptions{}), TrainingError);
  Vec y(3);
  y << 1, NAN, 2;
  EXPECT_THROW(train_channel(Mat::Zero(3, 1), y, h, TrainOptions{}), TrainingError);
}

TEST(PredictTest, SingleTrainingPoint) {
  const Hyperparams h = make_hyper(Vec::Ones(2), 1.3, 0.4);
  Mat X(1, 2);
  X << 0.2, -0.1;
  Vec Y(1);
  Y << 2.0;
  const GpChannel ch = GpChannel::fit(X, Y, h);
  const double sf2 = 1.3 * 1.3, vt2 = 0.4 * 0.4;
  EXPECT_NEAR(ch.mean(X.row(0).transpose()), sf2 * 2.0 / (sf2 + vt2), 1e-7);
}

TEST(PredictTest, NoiselessInterpolation) {
  std::mt19937_64 rng(12);
  const Mat X = random_inputs(rng, 15, 2);
  const Vec Y = smooth_target(X);
  // The factorization jitter (1e-8 of the diagonal) sets the variance floor.
  const GpChannel ch = GpChannel::fit(X, Y, make_hyper(Vec::Constant(2, 2.0), 0.5, 1e-6));
  for (int i = 0; i < X.rows(); ++i) {
    auto [mu, var] = ch.predict(X.row(i).transpose());
    EXPECT_NEAR(mu, Y(i), 1e-4);
    EXPECT_NEAR(var, 0.0, 1e-8);
  }
}

TEST(PredictTest, RevertsToPriorFarAway) {
  std::mt19937_64 rng(13);
  const Mat X = random_inputs(rng, 15, 2);
  const GpChannel ch = GpChannel::fit(X, smooth_target(X), make_hyper(Vec::Ones(2), 0.9, 0.1));
  auto [mu, var] = ch.predict(Vec::Constant(2, 100.0));
  EXPECT_NEAR(mu, 0.0, 1e-12);
  EXPECT_NEAR(var, 0.81, 1e-12);
}

TEST(PredictTest, VarianceBoundAtRandomQueries) {
  std::mt19937_64 rng(14);
  const Mat X = random_inputs(rng, 40, 3);
  const Hyperparams h = make_hyper(Vec::Constant(3, 0.8), 1.7, 0.3);
  const GpChannel ch = GpChannel::fit(X, smooth_target(X), h);
  const Mat Q = random_inputs(rng, 10000, 3, 3.0);
  for (int i = 0; i < Q.rows(); ++i) {
    const double var = ch.predict(Q.row(i).transpose()).second;
    ASSERT_GE(var, 0.0);
    ASSERT_LE(var, 1.7 * 1.7 + 0.3 * 0.3 + 1e-9);
  }
}

TEST(PredictTest, MeanIsLinearInTargets) {
  std::mt19937_64 rng(15);
  const Mat X = random_inputs(rng, 30, 2);
  const Hyperparams h = make_hyper(Vec::Ones(2), 1.0, 0.2);
  const Vec Y1 = smooth_target(X);
  const Vec Y2 = X.col(0).array().square().matrix();
  const GpChannel c1 = GpChannel::fit(X, Y1, h);
  const GpChannel c2 = GpChannel::fit(X, Y2, h);
  const GpChannel c3 = GpChannel::fit(X, 2.5 * Y1 - 0.7 * Y2, h);
  const Mat Q = random_inputs(rng, 50, 2);
  for (int i = 0; i < Q.rows(); ++i) {
    const Vec x = Q.row(i).transpose();
    EXPECT_NEAR(c3.mean(x), 2.5 * c1.mean(x) - 0.7 * c2.mean(x), 1e-10);
  }
}

TEST(PredictTest, EmptyChannelIsThePrior) {
  const GpChannel ch = GpChannel::fit(Mat(0, 2), Vec(0), make_hyper(Vec::Ones(2), 2.0, 0.1));
  auto [mu, var] = ch.predict(Vec::Zero(2));
  EXPECT_EQ(mu, 0.0);
  EXPECT_EQ(var, 4.0);
}

TEST(VectorModelTest, UntrainedAndWrongDimension) {
  const GpVectorModel empty;
  EXPECT_THROW(empty.predict(Vec::Zero(2)), TrainingError);
  EXPECT_THROW(variance_sup(empty), TrainingError);
  std::mt19937_64 rng(16);
  const Mat X = random_inputs(rng, 5, 6);
  const GpChannel ch = GpChannel::fit(X, smooth_target(X), make_hyper(Vec::Ones(6), 1, 0.1));
  const GpVectorModel m(InputSpec{true, true, true}, 2, {ch});
  EXPECT_THROW(m.predict(Vec::Zero(5)), DimensionError);
  EXPECT_THROW(GpVectorModel(InputSpec{true, true, false}, 2, {ch}), DimensionError);
}

TEST(VarianceSupTest, FormulaAndMax) {
  Mat X(1, 1);
  X << 0.0;
  const GpChannel a = GpChannel::fit(X, Vec::Ones(1), make_hyper(Vec::Ones(1), 1.0, 0.1));
  const GpChannel b = GpChannel::fit(X, Vec::Ones(1), make_hyper(Vec::Ones(1), 3.0, 0.1));
  InputSpec spec{true, false, false};
  EXPECT_NEAR(variance_sup(GpVectorModel(spec, 1, {a})), std::sqrt(1.01), 1e-15);
  EXPECT_NEAR(variance_sup(GpVectorModel(spec, 1, {a, b})), std::sqrt(9.01), 1e-15);
}

TEST(BoundTest, SinglePointPlugIn) {
  Mat X(1, 1);
  X << 0.3;
  Vec Y(1);
  Y << 0.8;
  const GpChannel ch = GpChannel::fit(X, Y, make_hyper(Vec::Ones(1), 1.0, 1.0));
  const GpVectorModel model(InputSpec{true, false, false}, 1, {ch});
  const BoundConstants b = compute_bound(model, 0.9);
  const double vs = 0.5 * std::log(2.0);
  const double ln20 = std::log(20.0);
  EXPECT_NEAR(b.varsigma(0), vs, 1e-12);
  // B^2 = y^2 / (sigma_f^2 + vartheta^2 + jitter).
  const double B2 = 0.64 / (2.0 * (1.0 + 1e-8));
  EXPECT_NEAR(b.rkhs_norm_est(0), std::sqrt(B2), 1e-9);
  EXPECT_NEAR(b.kappa(0), std::sqrt(2 * B2 + 300 * vs * std::pow(ln20, 3)), 1e-9);
  EXPECT_GE(b.kappa(0), std::sqrt(2.0) * b.rkhs_norm_est(0));
}

TEST(BoundTest, KappaIncreasesWithConfidenceAndRejectsBadEta) {
  std::mt19937_64 rng(18);
  const Mat X = random_inputs(rng, 20, 2);
  const GpChannel ch = GpChannel::fit(X, smooth_target(X), make_hyper(Vec::Ones(2), 1.0, 0.2));
  const GpVectorModel model(InputSpec{true, false, false}, 2, {ch, ch});
  double prev = 0.0;
  for (double eta : {0.5, 0.9, 0.99, 0.999}) {
    const double k = compute_bound(model, eta).kappa(0);
    EXPECT_GT(k, prev);
    prev = k;
  }
  EXPECT_THROW(compute_bound(model, 1.0), ConfigError);
  EXPECT_THROW(compute_bound(model, 0.0), ConfigError);
  Vec over(2);
  over << 3.0, 4.0;
  EXPECT_NEAR(compute_bound(model, 0.9, over).rkhs_norm_est(1), 4.0, 0.0);
}

TEST(BoundTest, CoverageOnRkhsFunction) {
  // f = sum_j a_j k(., z_j) has RKHS norm sqrt(a^T K_z a).
  std::mt19937_64 rng(19);
  const Hyperparams h = make_hyper(Vec::Constant(2, 1.0), 1.0, 0.05);
  const Mat Z = random_inputs(rng, 8, 2);
  std::normal_distribution<double> normal;
  Vec a(8);
  for (int i = 0; i < 8; ++i) a(i) = normal(rng);
  auto f = [&](const Vec& x) {
    double s = 0.0;
    for (int j = 0; j < 8; ++j) s += a(j) * kernel_eval(x, Z.row(j).transpose(), h, false);
    return s;
  };
  Mat Kz(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) Kz(i, j) = kernel_eval(Z.row(i).transpose(), Z.row(j).transpose(), h, false);
  const double norm = std::sqrt(a.dot(Kz * a));
  const Mat X = random_inputs(rng, 60, 2);
  Vec Y(60);
  for (int i = 0; i < 60; ++i) Y(i) = f(X.row(i).transpose()) + 0.05 * normal(rng);
  const GpVectorModel model(InputSpec{true, false, false}, 2, {GpChannel::fit(X, Y, h)});
  const double kappa = compute_bound(model, 0.9, Vec::Constant(1, norm)).kappa(0);
  const Mat Q = random_inputs(rng, 1000, 2);
  int covered = 0;
  for (int i = 0; i < Q.rows(); ++i) {
    const Vec x = Q.row(i).transpose();
    const Prediction p = model.predict(x);
    covered += std::abs(f(x) - p.mu(0)) <= kappa * std::sqrt(p.Sigma(0)) ? 1 : 0;
  }
  EXPECT_GE(covered, 900);
}

TEST(InputSpecTest, ParseAssembleRoundTrip) {
  const InputSpec s = InputSpec::parse("q,qddot");
  EXPECT_EQ(s.to_string(), "q,qddot");
  EXPECT_EQ(s.input_dim(3), 6);
  JointState st(Vec::Constant(3, 1), Vec::Constant(3, 2));
  Vec x = s.assemble(st);
  EXPECT_EQ(x.tail(3), Vec::Zero(3));
  st.qddot = Vec::Constant(3, 3);
  x = s.assemble(st);
  EXPECT_EQ(x.head(3), Vec::Constant(3, 1));
  EXPECT_EQ(x.tail(3), Vec::Constant(3, 3));
  EXPECT_THROW(InputSpec::parse("q,jerk"), ConfigError);
  EXPECT_THROW(InputSpec::parse(""), ConfigError);
}

TEST(PersistenceTest, RoundTripReproducesPredictions) {
  std::mt19937_64 rng(20);
  const InputSpec spec{true, true, false};
  const Mat X = random_inputs(rng, 30, 4);
  const Vec Y = smooth_target(X);
  TrainOptions opts;
  opts.restarts = 1;
  const GpChannel c1 = train_channel(X, Y, default_hyperparams(X, Y), opts);
  const GpChannel c2 = train_channel(X, -Y, default_hyperparams(X, -Y), opts);
  const GpVectorModel a(spec, 2, {c1});
  const GpVectorModel u(spec, 2, {c2});
  const std::string path = (std::filesystem::temp_directory_path() / "balance_gp_roundtrip.json").string();
  save_model(path, a, u);
  const auto [a2, u2] = load_model(path);
  std::filesystem::remove(path);
  EXPECT_EQ(a2.input_spec().to_string(), "q,qdot");
  const Mat Q = random_inputs(rng, 200, 4);
  for (int i = 0; i < Q.rows(); ++i) {
    const Vec x = Q.row(i).transpose();
    const Prediction p = a.predict(x), q = a2.predict(x);
    EXPECT_NEAR(p.mu(0), q.mu(0), 1e-12);
    EXPECT_NEAR(p.Sigma(0), q.Sigma(0), 1e-12);
    EXPECT_NEAR(u.predict(x).mu(0), u2.predict(x).mu(0), 1e-12);
  }
  EXPECT_ANY_THROW(load_model("/nonexistent/model.json"));
  EXPECT_ANY_THROW(model_from_json("{\"bad\": 1}"));
}

}  // namespace
}  // namespace balance
