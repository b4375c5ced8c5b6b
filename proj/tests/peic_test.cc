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
#include <memory>
#include <random>

#include <gtest/gtest.h>

#include "balance/dynamics.h"
#include "balance/eic.h"
#include "balance/errors.h"
#include "balance/gp.h"
#include "balance/peic.h"

namespace balance {
namespace {

constexpr double kPi = 3.14159265358979323846;

Vec V(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Hyperparams make_hyper(Vec W, double sf, double vt) {
  Hyperparams h;
  h.W = std::move(W);
  h.sigma_f = sf;
  h.vartheta = vt;
  return h;
}

Vec uniform_vec(std::mt19937_64& rng, int k, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(k);
  for (int i = 0; i < k; ++i) v(i) = u(rng);
  return v;
}

JointState random_state(std::mt19937_64& rng, int dof, double qr = 1.0, double vr = 2.0) {
  return JointState(uniform_vec(rng, dof, -qr, qr), uniform_vec(rng, dof, -vr, vr));
}

// Channels with no data: the GP prior.
std::shared_ptr<const GpVectorModel> prior_model(const InputSpec& spec, int dof, int outputs,
                                                 double sf, double vt) {
  const int d = spec.input_dim(dof);
  std::vector<GpChannel> ch;
  for (int i = 0; i < outputs; ++i) {
    ch.push_back(GpChannel::fit(Mat(0, d), Vec(0), make_hyper(Vec::Ones(d), sf, vt)));
  }
  return std::make_shared<GpVectorModel>(spec, dof, std::move(ch));
}

// Channels fitted on random smooth targets.
std::shared_ptr<const GpVectorModel> random_model(std::mt19937_64& rng, const InputSpec& spec,
                                                  int dof, int outputs, int N = 25,
                                                  double amp = 0.3) {
  const int d = spec.input_dim(dof);
  Mat X(N, d);
  for (int i = 0; i < N; ++i) X.row(i) = uniform_vec(rng, d, -1.5, 1.5).transpose();
  std::vector<GpChannel> ch;
  for (int c = 0; c < outputs; ++c) {
    const Vec w = uniform_vec(rng, d, -1.0, 1.0);
    Vec Y(N);
    for (int i = 0; i < N; ++i) Y(i) = amp * std::sin(X.row(i).dot(w));
    ch.push_back(GpChannel::fit(X, Y, make_hyper(Vec::Constant(d, 0.4), amp, 0.1 * amp)));
  }
  return std::make_shared<GpVectorModel>(spec, dof, std::move(ch));
}

// A constant-matrix source, bypassing the NominalModel kinds.
class FixedSource final : public DynamicsSource {
 public:
  FixedSource(int n, int m, Mat D, Vec H) : p_(Partition::make(n, m)), D_(std::move(D)), H_(std::move(H)) {}
  const Partition& partition() const override { return p_; }
  DynamicsEval eval(const JointState&) const override {
    DynamicsEval e;
    e.n = p_.n;
    e.m = p_.m;
    e.D = D_;
    e.C = Mat::Zero(D_.rows(), D_.cols());
    e.G = H_;
    e.H = H_;
    e.B = input_matrix(p_.n, p_.m);
    return e;
  }
  std::string name() const override { return "fixed"; }

 private:
  Partition p_;
  Mat D_;
  Vec H_;
};

SampleRegion point_region(const Vec& q, const Vec& qd) {
  SampleRegion r;
  r.q_lo = q;
  r.q_hi = q;
  r.qdot_lo = qd;
  r.qdot_hi = qd;
  r.samples = 3;
  return r;
}

// ---------------------------------------------------------------------------
// GP-enhanced dynamics

TEST(GpDynamicsTest, PriorReducesToNominalWithSignalVariance) {
  const InputSpec spec;
  const GpDynamics gd(NominalModel::leg_default(), prior_model(spec, 3, 2, 0.3, 0.05),
                      prior_model(spec, 3, 1, 0.7, 0.05));
  std::mt19937_64 rng(1);
  for (int k = 0; k < 20; ++k) {
    const JointState s = random_state(rng, 3);
    const DynamicsEval e = gd.eval(s);
    const DynamicsEval nom = NominalModel::leg_default().eval(s);
    EXPECT_EQ(e.D, nom.D);
    EXPECT_EQ(e.H, nom.H);
    const Vec var = gd.variance(s);
    EXPECT_DOUBLE_EQ(var(0), 0.09);
    EXPECT_DOUBLE_EQ(var(1), 0.09);
    EXPECT_DOUBLE_EQ(var(2), 0.49);
  }
}

TEST(GpDynamicsTest, HEqualsNominalPlusMean) {
  std::mt19937_64 rng(2);
  const InputSpec spec;
  auto a = random_model(rng, spec, 3, 2);
  auto u = random_model(rng, spec, 3, 1);
  const NominalModel nom = NominalModel::leg_default();
  const GpDynamics gd(nom, a, u);
  for (int k = 0; k < 30; ++k) {
    JointState s = random_state(rng, 3);
    s.qddot = uniform_vec(rng, 3, -3, 3);
    const Vec x = spec.assemble(s);
    const Vec mu_a = a->mean(x);
    const Vec mu_u = u->mean(x);
    const DynamicsEval e = gd.eval(s);
    const DynamicsEval ne = nom.eval(s);
    EXPECT_LT((e.H.head(2) - ne.H.head(2) - mu_a).norm(), 1e-14);
    EXPECT_LT(std::abs(e.H(2) - ne.H(2) - mu_u(0)), 1e-14);
    EXPECT_EQ(e.D, ne.D);

    const GpEnhancedEval ge = gp_enhanced_eval(gd, s);
    EXPECT_LT((ge.eval.H - e.H).norm(), 1e-14);
    EXPECT_LT((ge.a.mu - mu_a).norm(), 1e-14);

    const double smax_a = variance_sup(*a);
    const double smax_u = variance_sup(*u);
    const Vec var = gd.variance(s);
    EXPECT_LE(var.head(2).maxCoeff(), smax_a * smax_a + 1e-12);
    EXPECT_LE(var(2), smax_u * smax_u + 1e-12);
    EXPECT_GE(var.minCoeff(), 0.0);
  }
}

TEST(GpDynamicsTest, AccelPolicyControlsTheAccelerationInput) {
  std::mt19937_64 rng(3);
  const InputSpec spec;
  auto a = random_model(rng, spec, 3, 2);
  auto u = random_model(rng, spec, 3, 1);
  const GpDynamics prev(NominalModel::leg_default(), a, u, AccelPolicy::kPreviousStep);
  const GpDynamics omit(NominalModel::leg_default(), a, u, AccelPolicy::kOmit);
  JointState s = random_state(rng, 3);
  const JointState bare = s;
  s.qddot = V({2.0, -1.0, 1.5});
  EXPECT_EQ(omit.eval(s).H, omit.eval(bare).H);
  EXPECT_EQ(omit.eval(s).H, prev.eval(bare).H);
  EXPECT_GT((prev.eval(s).H - prev.eval(bare).H).norm(), 1e-6);
}

TEST(GpDynamicsTest, PolicyNamesRoundTrip) {
  EXPECT_EQ(parse_accel_policy(to_string(AccelPolicy::kOmit)), AccelPolicy::kOmit);
  EXPECT_EQ(parse_accel_policy(to_string(AccelPolicy::kPreviousStep)), AccelPolicy::kPreviousStep);
  EXPECT_THROW(parse_accel_policy("future"), ConfigError);
}

TEST(GpDynamicsTest, RejectsUntrainedOrMismatchedModels) {
  const InputSpec spec;
  auto good_a = prior_model(spec, 3, 2, 1, 0.1);
  auto good_u = prior_model(spec, 3, 1, 1, 0.1);
  auto empty = std::make_shared<GpVectorModel>();
  EXPECT_THROW(GpDynamics(NominalModel::leg_default(), empty, good_u), TrainingError);
  EXPECT_THROW(GpDynamics(NominalModel::leg_default(), good_a, nullptr), TrainingError);
  EXPECT_THROW(GpDynamics(NominalModel::leg_default(), good_u, good_u), DimensionError);
  auto furuta_u = prior_model(spec, 2, 1, 1, 0.1);
  auto furuta_a = prior_model(spec, 2, 2, 1, 0.1);
  EXPECT_THROW(GpDynamics(NominalModel::leg_default(), furuta_a, furuta_u), DimensionError);
}

// Interpolated residuals recover the plant: D-bar qddot + H^gp = B u at the
// training states.
TEST(GpDynamicsTest, InterpolatesPlantAtTrainingStates) {
  std::mt19937_64 rng(4);
  const LegPlant plant;
  const NominalModel nom = NominalModel::leg_default();
  const InputSpec spec;
  std::vector<JointState> states;
  std::vector<Vec> controls;
  for (int k = 0; k < 30; ++k) {
    JointState s = random_state(rng, 3, 0.8, 1.0);
    const Vec u = uniform_vec(rng, 2, -0.5, 0.5);
    s.qddot = forward_accel(plant.eval(s), u);
    states.push_back(s);
    controls.push_back(u);
  }
  const auto samples = residual_targets(nom, spec, states, controls);
  const int d = spec.input_dim(3);
  Mat X(30, d);
  Mat Y(30, 3);
  for (int i = 0; i < 30; ++i) {
    X.row(i) = samples[i].x.transpose();
    Y.row(i) << samples[i].target_a.transpose(), samples[i].target_u.transpose();
  }
  std::vector<GpChannel> ca, cu;
  for (int c = 0; c < 3; ++c) {
    const double sf = std::max(1e-3, std::sqrt(Y.col(c).squaredNorm() / 30.0));
    GpChannel ch = GpChannel::fit(X, Y.col(c), make_hyper(Vec::Constant(d, 0.2), sf, 1e-5 * sf));
    (c < 2 ? ca : cu).push_back(std::move(ch));
  }
  const GpDynamics gd(nom, std::make_shared<GpVectorModel>(spec, 3, ca),
                      std::make_shared<GpVectorModel>(spec, 3, cu));
  for (int i = 0; i < 30; ++i) {
    const DynamicsEval e = gd.eval(states[i]);
    const Vec lhs = e.D * *states[i].qddot + e.H;
    EXPECT_LT((lhs - e.B * controls[i]).cwiseAbs().maxCoeff(), 1e-3) << i;
  }
}

// ---------------------------------------------------------------------------
// Residual targets

TEST(ResidualTargetsTest, MatchedPlantGivesZero) {
  std::mt19937_64 rng(5);
  const NominalModel nom = NominalModel::leg_default();
  std::vector<JointState> states;
  std::vector<Vec> controls;
  for (int k = 0; k < 50; ++k) {
    JointState s = random_state(rng, 3);
    const Vec u = uniform_vec(rng, 2, -1, 1);
    s.qddot = forward_accel(nom.eval(s), u);
    states.push_back(s);
    controls.push_back(u);
  }
  for (const auto& r : residual_targets(nom, InputSpec{}, states, controls)) {
    EXPECT_LT(r.target_a.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT(r.target_u.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(r.x.size(), 9);
  }
}

TEST(ResidualTargetsTest, ConstantBiasIsRecovered) {
  Mat D(3, 3);
  D << 0.2, 0.01, 0.02, 0.01, 0.15, 0.03, 0.02, 0.03, 0.1;
  const Vec H = V({0.1, -0.2, 0.3});
  const Vec b = V({0.05, -0.07, 0.11});
  const NominalModel nom = NominalModel::custom(2, 1, D, H);
  const FixedSource plant(2, 1, D, H + b);
  std::mt19937_64 rng(6);
  std::vector<JointState> states;
  std::vector<Vec> controls;
  for (int k = 0; k < 20; ++k) {
    JointState s = random_state(rng, 3);
    const Vec u = uniform_vec(rng, 2, -1, 1);
    s.qddot = forward_accel(plant.eval(s), u);
    states.push_back(s);
    controls.push_back(u);
  }
  for (const auto& r : residual_targets(nom, InputSpec{}, states, controls)) {
    EXPECT_LT((r.target_a - b.head(2)).norm(), 1e-12);
    EXPECT_NEAR(r.target_u(0), b(2), 1e-12);
  }
}

TEST(ResidualTargetsTest, MatchesModelDifferenceIdentity) {
  std::mt19937_64 rng(7);
  const LegPlant plant;
  const NominalModel nom = NominalModel::leg_default();
  std::vector<JointState> states;
  std::vector<Vec> controls;
  for (int k = 0; k < 100; ++k) {
    JointState s = random_state(rng, 3);
    const Vec u = uniform_vec(rng, 2, -1, 1);
    s.qddot = forward_accel(plant.eval(s), u);
    states.push_back(s);
    controls.push_back(u);
  }
  const auto samples = residual_targets(nom, InputSpec{}, states, controls);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const DynamicsEval p = plant.eval(states[i]);
    const DynamicsEval n = nom.eval(states[i]);
    const Vec expected = (p.D - n.D) * *states[i].qddot + (p.H - n.H);
    Vec got(3);
    got << samples[i].target_a, samples[i].target_u;
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(ResidualTargetsTest, Errors) {
  const NominalModel nom = NominalModel::leg_default();
  const JointState no_acc(Vec::Zero(3), Vec::Zero(3));
  EXPECT_THROW(residual_targets(nom, InputSpec{}, {no_acc}, {Vec::Zero(2)}), DimensionError);
  JointState s = no_acc;
  s.qddot = Vec::Zero(3);
  EXPECT_THROW(residual_targets(nom, InputSpec{}, {s}, {}), DimensionError);
  EXPECT_THROW(residual_targets(nom, InputSpec{}, {s}, {Vec::Zero(3)}), DimensionError);
}

TEST(ResidualTrainingTest, ChannelsSplitByRow) {
  std::mt19937_64 rng(8);
  const LegPlant plant;
  const NominalModel nom = NominalModel::leg_default();
  std::vector<JointState> states;
  std::vector<Vec> controls;
  for (int k = 0; k < 40; ++k) {
    JointState s = random_state(rng, 3);
    const Vec u = uniform_vec(rng, 2, -1, 1);
    s.qddot = forward_accel(plant.eval(s), u);
    states.push_back(s);
    controls.push_back(u);
  }
  const InputSpec spec = InputSpec::parse("q,qdot");
  const auto samples = residual_targets(nom, spec, states, controls);
  TrainOptions opts;
  opts.restarts = 1;
  opts.max_iters = 30;
  const ResidualModels one = train_residual_models(samples, spec, 3, opts, 1);
  const ResidualModels three = train_residual_models(samples, spec, 3, opts, 3);
  EXPECT_EQ(one.a.outputs(), 2);
  EXPECT_EQ(one.u.outputs(), 1);
  EXPECT_EQ(one.reports.size(), 3u);
  for (const auto& r : one.reports) EXPECT_LE(r.nlml_final, r.nlml_init);
  const Vec x = samples[3].x;
  EXPECT_EQ(one.a.mean(x), three.a.mean(x));
  EXPECT_EQ(one.u.mean(x), three.u.mean(x));
  EXPECT_THROW(train_residual_models({samples[0]}, spec, 3, opts), TrainingError);
  EXPECT_THROW(train_residual_models(samples, InputSpec{}, 3, opts), DimensionError);
}

// ---------------------------------------------------------------------------
// Condition checker

TEST(ConditionsTest, FurutaS1PassesWithAutomaticC3C4) {
  const NominalModel s1 = NominalModel::furuta_s1();
  const ConditionReport r = check_conditions(s1, s1.partition(), point_region(Vec::Zero(2), Vec::Zero(2)));
  // D-bar at theta2 = 0 is [[0.05, -0.02], [-0.02, 0.02]]: trace 0.07,
  // determinant 6e-4.
  const double tr = 0.07, det = 0.05 * 0.02 - 0.02 * 0.02;
  const double disc = std::sqrt(tr * tr / 4 - det);
  EXPECT_NEAR(r.max_eigenvalue, tr / 2 + disc, 1e-12);
  EXPECT_NEAR(r.min_eigenvalue, tr / 2 - disc, 1e-12);
  EXPECT_TRUE(r.c1);
  EXPECT_TRUE(r.c2);
  EXPECT_TRUE(r.c3 && r.c3_auto);
  EXPECT_TRUE(r.c4 && r.c4_auto);
  EXPECT_TRUE(r.all());

  const ConditionReport wide = check_conditions(s1, s1.partition(), SampleRegion::around_upright(2));
  EXPECT_TRUE(wide.all());
  EXPECT_EQ(wide.samples, 500);
  EXPECT_GT(wide.min_eigenvalue, 0.0);
}

TEST(ConditionsTest, FurutaS2Passes) {
  const NominalModel s2 = NominalModel::furuta_s2();
  const ConditionReport r = check_conditions(s2, s2.partition(), SampleRegion::around_upright(2));
  EXPECT_TRUE(r.all());
  EXPECT_NEAR(r.min_eigenvalue, 0.01, 1e-12);
  EXPECT_NEAR(r.max_eigenvalue, 0.03, 1e-12);
  EXPECT_TRUE(r.c3_auto);
}

// ker(D_ua) for a 1x2 row [a, b] is spanned by [-b, a], so the angle between
// two kernels equals the angle between the rows.
double row_angle(const Vec& r1, const Vec& r2) {
  return std::acos(std::min(1.0, std::abs(r1.dot(r2)) / (r1.norm() * r2.norm())));
}

Mat leg_kernel(const NominalModel& nom, double th2, double th3) {
  const DynamicsEval e = nom.eval(JointState(V({0.0, th2, th3}), Vec::Zero(3)));
  Eigen::JacobiSVD<Mat> svd(e.Dua(), Eigen::ComputeFullV);
  return svd.matrixV().rightCols(1);
}

TEST(ConditionsTest, LegKernelRotatesWithConfiguration) {
  const NominalModel nom = NominalModel::leg_default();
  // Rows [0.025 cos th3, 0.05 cos(th2 - th3)].
  const Vec r00 = V({0.025, 0.05});
  const Vec r_a = V({0.025, 0.05 * std::cos(kPi / 3)});  // (th2, th3) = (pi/3, 0)
  const Vec r_b = V({0.025 * std::cos(kPi / 3), 0.05 * std::cos(-kPi / 3)});  // (0, pi/3)
  const double a = principal_angle(leg_kernel(nom, 0, 0), leg_kernel(nom, kPi / 3, 0));
  EXPECT_NEAR(a, row_angle(r00, r_a), 1e-12);
  EXPECT_GT(a, 0.2);
  // Both entries scale by cos(pi/3) here, so the kernel does not move.
  const double b = principal_angle(leg_kernel(nom, 0, 0), leg_kernel(nom, 0, kPi / 3));
  EXPECT_NEAR(b, row_angle(r00, r_b), 1e-7);
  EXPECT_LT(b, 1e-7);
}

TEST(ConditionsTest, LegNominalPassesAll) {
  const NominalModel nom = NominalModel::leg_default();
  const ConditionReport r = check_conditions(nom, nom.partition(), SampleRegion::around_upright(3));
  EXPECT_TRUE(r.c1);
  EXPECT_TRUE(r.c2);
  EXPECT_TRUE(r.c3);
  EXPECT_FALSE(r.c3_auto);
  EXPECT_TRUE(r.c4);
  EXPECT_FALSE(r.c4_auto);
  EXPECT_GT(r.max_kernel_angle, 0.2);
  EXPECT_EQ(r.rank_daa, 2);
  EXPECT_EQ(r.rank_duu, 1);
  EXPECT_EQ(r.rank_dua, 1);
  // Verdicts follow from the stored evidence.
  EXPECT_EQ(r.c1, r.max_asymmetry <= 1e-12 && r.min_eigenvalue > 0.0);
  EXPECT_EQ(r.c3, r.max_kernel_angle > r.angle_threshold);
  EXPECT_EQ(r.c4, r.worst_condition < r.condition_limit);
  EXPECT_GE(r.d, r.max_eigenvalue - 1e-12);
  EXPECT_GT(r.h, 0.0);
}

TEST(ConditionsTest, ConstantNominalFailsC3) {
  Mat D(3, 3);
  D << 0.15, 0.02, 0.025, 0.02, 0.15, 0.05, 0.025, 0.05, 0.1;
  const NominalModel nom = NominalModel::custom(2, 1, D, Vec::Zero(3));
  const ConditionReport r = check_conditions(nom, nom.partition(), SampleRegion::around_upright(3));
  EXPECT_TRUE(r.c1);
  EXPECT_TRUE(r.c2);
  EXPECT_FALSE(r.c3);
  EXPECT_LT(r.max_kernel_angle, 1e-6);
  EXPECT_TRUE(r.c4);
  EXPECT_FALSE(r.all());
}

TEST(ConditionsTest, DegenerateMatricesFailC1C2C4) {
  Mat D(3, 3);
  D << 0.15, 0.02, 0.0, 0.02, 0.15, 0.0, 0.0, 0.0, 0.1;  // D_ua = 0
  const NominalModel zero_coupling = NominalModel::custom(2, 1, D, Vec::Zero(3));
  const ConditionReport r = check_conditions(zero_coupling, zero_coupling.partition(),
                                             SampleRegion::around_upright(3));
  EXPECT_TRUE(r.c1);
  EXPECT_FALSE(r.c2);
  EXPECT_EQ(r.rank_dua, 0);
  EXPECT_FALSE(r.c4);

  Mat N(3, 3);
  N << 0.1, 0.2, 0.01, 0.2, 0.1, 0.02, 0.01, 0.02, 0.1;  // indefinite
  const NominalModel indefinite = NominalModel::custom(2, 1, N, Vec::Zero(3));
  const ConditionReport ri = check_conditions(indefinite, indefinite.partition(),
                                              SampleRegion::around_upright(3));
  EXPECT_FALSE(ri.c1);
  EXPECT_LT(ri.min_eigenvalue, 0.0);

  Mat A = D;
  A(0, 2) = 0.03;
  A(1, 2) = 0.04;  // asymmetric
  const NominalModel asym = NominalModel::custom(2, 1, A, Vec::Zero(3));
  const ConditionReport ra = check_conditions(asym, asym.partition(), SampleRegion::around_upright(3));
  EXPECT_FALSE(ra.c1);
  EXPECT_NEAR(ra.max_asymmetry, 0.04, 1e-15);
}

TEST(ConditionsTest, PartitionMustMatch) {
  const NominalModel nom = NominalModel::leg_default();
  EXPECT_THROW(check_conditions(nom, Partition::make(1, 1), SampleRegion::around_upright(3)),
               DimensionError);
}

// ---------------------------------------------------------------------------
// Variance-adaptive gains

TEST(AdaptiveGainsTest, FurutaSchedule) {
  const GainSchedule outer{10, 50, 3, 10, 1e-3, 1e6};
  const GainSchedule inner{1000, 500, 100, 200, 1e-3, 1e6};
  const AuxGains g1 = adaptive_gains(outer, V({0.0}));
  const AuxGains g2 = adaptive_gains(inner, V({0.0}));
  EXPECT_DOUBLE_EQ(g1.kp(0, 0), 10.0);
  EXPECT_DOUBLE_EQ(g1.kd(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(g2.kp(0, 0), 1000.0);
  EXPECT_DOUBLE_EQ(g2.kd(0, 0), 100.0);
  EXPECT_NEAR(adaptive_gains(outer, V({0.1})).kp(0, 0), 10.0 + 50.0 * 0.1, 1e-12);
}

TEST(AdaptiveGainsTest, LegScheduleIsDiagonal) {
  const GainSchedule outer{15, 20, 3, 10, 1e-3, 1e6};
  const AuxGains g = adaptive_gains(outer, Vec::Zero(2));
  EXPECT_LT((g.kp - 15.0 * Mat::Identity(2, 2)).norm(), 1e-12);
  const AuxGains h = adaptive_gains(outer, V({0.1, 0.3}));
  EXPECT_NEAR(h.kp(0, 0), 17.0, 1e-12);
  EXPECT_NEAR(h.kp(1, 1), 21.0, 1e-12);
  EXPECT_EQ(h.kp(0, 1), 0.0);
}

TEST(AdaptiveGainsTest, MonotoneAndClamped) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    GainSchedule s{1 + 20 * u(rng), 100 * u(rng), 1 + 5 * u(rng), 50 * u(rng), 0.5 + u(rng),
                   10 + 40 * u(rng)};
    const double smax2 = 2.0;
    double prev_kp = -1, prev_kd = -1;
    for (int i = 0; i <= 100; ++i) {
      const double sig = smax2 * i / 100.0;
      const AuxGains g = adaptive_gains(s, V({sig}));
      const double kp = g.kp(0, 0), kd = g.kd(0, 0);
      EXPECT_GE(kp, prev_kp);
      EXPECT_GE(kd, prev_kd);
      EXPECT_GE(kp, s.k_low);
      EXPECT_LE(kp, s.k_high);
      EXPECT_GE(kd, s.k_low);
      EXPECT_LE(kd, s.k_high);
      prev_kp = kp;
      prev_kd = kd;
    }
  }
  EXPECT_THROW(adaptive_gains(GainSchedule{}, V({-0.1})), DimensionError);
}

// ---------------------------------------------------------------------------
// BEM estimation on the GP-enhanced model

TEST(EstimateBemTest, ZeroResidualMatchesNominal) {
  const InputSpec spec;
  const GpDynamics gd(NominalModel::leg_default(), prior_model(spec, 3, 2, 1, 0.1),
                      prior_model(spec, 3, 1, 1, 0.1));
  const NominalModel nom = NominalModel::leg_default();
  std::mt19937_64 rng(10);
  for (int k = 0; k < 50; ++k) {
    const JointState s = random_state(rng, 3, 0.5, 1.0);
    const Vec v = uniform_vec(rng, 2, -5, 5);
    const BEMSolution a = estimate_bem(gd, s, v, Vec::Zero(1));
    const BEMSolution b = solve_bem(nom, s, v, Vec::Zero(1));
    EXPECT_NEAR(a.qu_e(0), b.qu_e(0), 1e-8);
  }
  const NominalModel s1 = NominalModel::furuta_s1();
  const GpDynamics gf(s1, prior_model(spec, 2, 1, 1, 0.1), prior_model(spec, 2, 1, 1, 0.1));
  for (double v = -100; v <= 100; v += 25) {
    const JointState s(Vec::Zero(2), Vec::Zero(2));
    EXPECT_NEAR(estimate_bem(gf, s, V({v}), Vec::Zero(1)).qu_e(0),
                solve_bem(s1, s, V({v}), Vec::Zero(1)).qu_e(0), 1e-8);
  }
}

// A residual of -delta sin(q2) on S^n1 scales gravity by (1 + delta):
//   -0.02 cos(q) v - (1 + delta) sin(q) = 0  =>  q = atan(-0.02 v / (1 + delta)).
TEST(EstimateBemTest, GravityShiftMovesRootByClosedForm) {
  const double delta = 0.3;
  const InputSpec spec = InputSpec::parse("q");
  const int N = 81;
  Mat X(N, 2);
  Vec Y(N);
  for (int i = 0; i < N; ++i) {
    const double q2 = -1.7 + 3.4 * i / (N - 1);
    X.row(i) << 0.0, q2;
    Y(i) = -delta * std::sin(q2);
  }
  std::vector<GpChannel> cu;
  cu.push_back(GpChannel::fit(X, Y, make_hyper(V({1e-8, 2.0}), 0.3, 1e-5)));
  const GpDynamics gd(NominalModel::furuta_s1(), prior_model(spec, 2, 1, 1, 0.1),
                      std::make_shared<GpVectorModel>(spec, 2, cu), AccelPolicy::kOmit);
  for (double v = -100; v <= 100; v += 10) {
    const JointState s(V({0.3, 0.0}), Vec::Zero(2));
    const double got = estimate_bem(gd, s, V({v}), Vec::Zero(1)).qu_e(0);
    EXPECT_NEAR(got, std::atan(-0.02 * v / (1.0 + delta)), 1e-5) << v;
    if (v != 0) EXPECT_GT(std::abs(got - std::atan(-0.02 * v)), 1e-3);
  }
}

// ---------------------------------------------------------------------------
// PEIC law

TEST(PeicLawTest, DegeneratePartitionEqualsEic) {
  std::mt19937_64 rng(11);
  const InputSpec spec;
  const GpDynamics gd(NominalModel::furuta_s1(), random_model(rng, spec, 2, 1),
                      random_model(rng, spec, 2, 1));
  const Partition& p = gd.partition();
  for (int k = 0; k < 200; ++k) {
    JointState s = random_state(rng, 2, 1.2, 2.0);
    s.qddot = uniform_vec(rng, 2, -5, 5);
    const DynamicsEval e = gd.eval(s);
    const Vec v_ext = uniform_vec(rng, 1, -20, 20);
    const Vec v_u = uniform_vec(rng, 1, -20, 20);
    const PeicLawResult r = peic_law(e, p, v_ext, v_u);
    const Vec ref = control_uint(e, control_vint(e, v_u));
    EXPECT_LT((r.u - ref).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((eic_law(e, v_u) - ref).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(PeicLawTest, DegeneratePartitionControllersAgree) {
  std::mt19937_64 rng(12);
  const InputSpec spec;
  auto gd = std::make_shared<GpDynamics>(NominalModel::furuta_s1(), random_model(rng, spec, 2, 1),
                                         random_model(rng, spec, 2, 1));
  const GainSchedule outer{10, 50, 3, 10, 1e-3, 1e6};
  const GainSchedule inner{1000, 500, 100, 200, 1e-3, 1e6};
  PeicController peic(gd, gd->partition(), outer, inner, 1.0 / 400);
  EicController eic(gd, outer, inner, 1.0 / 400);
  const TrajectoryPoint ref{Vec::Zero(1), Vec::Zero(1), Vec::Zero(1)};
  for (int k = 0; k < 100; ++k) {
    JointState s = random_state(rng, 2, 0.3, 0.5);
    s.qddot = uniform_vec(rng, 2, -1, 1);
    const ControlOutput a = peic.compute(s, ref);
    const ControlOutput b = eic.compute(s, ref);
    EXPECT_LT(std::abs(a.u(0) - b.u(0)), 1e-10);
    EXPECT_EQ(a.qu_e, b.qu_e);
  }
}

TEST(PeicLawTest, CommandedAccelerationsAreSelfConsistent) {
  std::mt19937_64 rng(13);
  const NominalModel nom = NominalModel::leg_default();
  for (const auto& au : {std::vector<int>{1}, std::vector<int>{0}}) {
    const Partition p = Partition::make(2, 1, au);
    for (int k = 0; k < 100; ++k) {
      const JointState s = random_state(rng, 3);
      const DynamicsEval e = nom.eval(s);
      const Vec v_ext = uniform_vec(rng, 2, -10, 10);
      const Vec v_u = uniform_vec(rng, 1, -10, 10);
      const PeicLawResult r = peic_law(e, p, v_ext, v_u);
      const int aa = p.aa_indices[0];
      EXPECT_EQ(r.qdd_cmd(aa), v_ext(aa));
      EXPECT_EQ(r.qdd_cmd(2), v_u(0));
      // The unactuated row holds under the commanded accelerations.
      EXPECT_LT(std::abs(e.D.row(2).dot(r.qdd_cmd) + e.H(2)), 1e-10);
      // The model's own response to u reproduces (v_int, v_u_int).
      const Vec resp = internal_response(e, p, V({v_ext(aa)}), r.u);
      EXPECT_LT(std::abs(resp(0) - r.v_int(0)), 1e-9);
      EXPECT_LT(std::abs(resp(1) - v_u(0)), 1e-9);
      // Forward dynamics under the model realize the full command.
      EXPECT_LT((forward_accel(e, r.u) - r.qdd_cmd).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(PeicLawTest, AaInputDoesNotReachInternalGroup) {
  std::mt19937_64 rng(14);
  const NominalModel nom = NominalModel::leg_default();
  const Partition p = nom.partition();
  for (int k = 0; k < 50; ++k) {
    const JointState s = random_state(rng, 3);
    const DynamicsEval e = nom.eval(s);
    const PeicLawResult r = peic_law(e, p, uniform_vec(rng, 2, -5, 5), uniform_vec(rng, 1, -5, 5));
    const Vec qdd_aa = V({r.qdd_cmd(p.aa_indices[0])});
    const Vec base = internal_response(e, p, qdd_aa, r.u);
    const double h = 1e-3;
    Vec ua = r.u;
    ua(p.aa_indices[0]) += h;
    EXPECT_LT(((internal_response(e, p, qdd_aa, ua) - base) / h).cwiseAbs().maxCoeff(), 1e-9);
    Vec uu = r.u;
    uu(p.au_indices[0]) += h;
    EXPECT_GT(((internal_response(e, p, qdd_aa, uu) - base) / h).cwiseAbs().maxCoeff(), 1.0);
  }
}

TEST(PeicLawTest, EquilibriumIsAFixedPoint) {
  const NominalModel nom = NominalModel::leg_default();
  const Partition p = nom.partition();
  const Vec qa = V({0.2, -0.3});
  const JointState probe(V({0.2, -0.3, 0.0}), Vec::Zero(3));
  const BEMSolution bem = solve_bem(nom, probe, Vec::Zero(2), Vec::Zero(1));
  const JointState s(V({qa(0), qa(1), bem.qu_e(0)}), Vec::Zero(3));
  const DynamicsEval e = nom.eval(s);
  const PeicLawResult r = peic_law(e, p, Vec::Zero(2), Vec::Zero(1));
  EXPECT_LT(r.v_int.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(forward_accel(e, r.u).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((r.u - e.H.head(2)).norm(), 1e-8);
}

TEST(PeicLawTest, SingularBalanceBlockIsRejected) {
  Mat D(3, 3);
  D << 0.15, 0.02, 0.05, 0.02, 0.15, 0.0, 0.05, 0.0, 0.1;  // D_ua^u = 0
  const NominalModel nom = NominalModel::custom(2, 1, D, Vec::Zero(3));
  const DynamicsEval e = nom.eval(JointState(Vec::Zero(3), Vec::Zero(3)));
  EXPECT_THROW(peic_law(e, nom.partition(), Vec::Zero(2), Vec::Zero(1)), ControllabilityError);
  // Balancing with the other joint works.
  EXPECT_NO_THROW(peic_law(e, Partition::make(2, 1, {0}), Vec::Zero(2), Vec::Zero(1)));
  EXPECT_THROW(peic_law(e, nom.partition(), Vec::Zero(1), Vec::Zero(1)), DimensionError);
}

TEST(PeicControllerTest, DeterministicAndResettable) {
  std::mt19937_64 rng(15);
  const InputSpec spec;
  auto gd = std::make_shared<GpDynamics>(NominalModel::leg_default(),
                                         random_model(rng, spec, 3, 2, 25, 0.01),
                                         random_model(rng, spec, 3, 1, 25, 0.01));
  const GainSchedule outer{15, 20, 3, 10, 1e-3, 1e6};
  const GainSchedule inner{400, 20, 60, 10, 1e-3, 1e6};
  PeicController a(gd, gd->partition(), outer, inner, 1.0 / 200, BemOptions{}, 1.0);
  PeicController b(gd, gd->partition(), outer, inner, 1.0 / 200, BemOptions{}, 1.0);
  std::vector<JointState> states;
  for (int k = 0; k < 40; ++k) {
    JointState s = random_state(rng, 3, 0.2, 0.3);
    s.qddot = uniform_vec(rng, 3, -1, 1);
    states.push_back(s);
  }
  const TrajectoryPoint ref{V({0.1, -0.1}), Vec::Zero(2), Vec::Zero(2)};
  std::vector<Vec> first;
  for (const auto& s : states) {
    const ControlOutput oa = a.compute(s, ref);
    const ControlOutput ob = b.compute(s, ref);
    EXPECT_EQ(oa.u, ob.u);
    EXPECT_EQ(oa.qu_e_dot, ob.qu_e_dot);
    EXPECT_EQ(oa.kp1_diag.size(), 2);
    EXPECT_EQ(oa.Sigma_u.size(), 1);
    first.push_back(oa.u);
  }
  a.reset();
  for (std::size_t k = 0; k < states.size(); ++k) EXPECT_EQ(a.compute(states[k], ref).u, first[k]);
  EXPECT_THROW(PeicController(nullptr, Partition::make(2, 1), outer, inner, 0.01), ConfigError);
  EXPECT_THROW(PeicController(gd, Partition::make(1, 1), outer, inner, 0.01), DimensionError);
}

// ---------------------------------------------------------------------------
// Error bound

TEST(ErrorBoundTest, UnitGainsGiveUnitQuadraticRoots) {
  ErrorBoundParams params;
  const ErrorBoundResult r = error_bound(params, Mat::Identity(1, 1), Mat::Identity(1, 1));
  ASSERT_EQ(r.eigenvalues.size(), 2u);
  // lambda^2 + lambda + 1 = 0.
  for (const auto& ev : r.eigenvalues) {
    EXPECT_NEAR(ev.real(), -0.5, 1e-12);
    EXPECT_NEAR(std::abs(ev.imag()), std::sqrt(3.0) / 2, 1e-12);
  }
  EXPECT_TRUE(r.hurwitz);
}

TEST(ErrorBoundTest, LyapunovSolution) {
  Mat A(2, 2);
  A << 0, 1, -1, -1;
  const Mat P = solve_lyapunov(A, Mat::Identity(2, 2));
  Mat expected(2, 2);
  expected << 1.5, 0.5, 0.5, 1.0;
  EXPECT_LT((P - expected).norm(), 1e-12);

  std::mt19937_64 rng(16);
  for (int t = 0; t < 10; ++t) {
    Mat M = Mat::Random(4, 4);
    Eigen::EigenSolver<Mat> es(M);
    const double shift = es.eigenvalues().real().maxCoeff() + 0.5;
    const Mat H = M - shift * Mat::Identity(4, 4);
    const Mat Q = Mat::Identity(4, 4);
    const Mat X = solve_lyapunov(H, Q);
    EXPECT_LT((H.transpose() * X + X * H + Q).norm(), 1e-9);
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat>(X).eigenvalues().minCoeff(), 0.0);
  }
}

TEST(ErrorBoundTest, RadiusFromHandComputedLyapunov) {
  ErrorBoundParams params;
  params.c2 = 0.1;
  const ErrorBoundResult zero = error_bound(ErrorBoundParams{}, Mat::Identity(1, 1), Mat::Identity(1, 1));
  EXPECT_EQ(zero.radius, 0.0);
  const ErrorBoundResult r = error_bound(params, Mat::Identity(1, 1), Mat::Identity(1, 1));
  const double p_norm = 1.25 + std::sqrt(0.0625 + 0.25);
  EXPECT_NEAR(r.p_norm, p_norm, 1e-12);
  EXPECT_NEAR(r.radius, p_norm * 0.1 / 0.5, 1e-12);

  params.c1 = 0.2;
  const ErrorBoundResult r2 = error_bound(params, Mat::Identity(1, 1), Mat::Identity(1, 1));
  EXPECT_NEAR(r2.radius, p_norm * 0.1 / (0.5 - p_norm * 0.2), 1e-12);

  params.c1 = 1.0;
  EXPECT_TRUE(std::isinf(error_bound(params, Mat::Identity(1, 1), Mat::Identity(1, 1)).radius));
}

TEST(ErrorBoundTest, DerivedConstants) {
  ErrorBoundParams p;
  p.c1 = 0.01;
  p.c2 = 0.02;
  p.c3 = 0.03;
  p.c4 = 0.04;
  p.d_a1 = 0.12;
  p.d_u1 = 0.1;
  p.d_u2 = 0.2;
  p.sigma1 = 0.05;
  p.sigma_m = 0.06;
  p.sigma_max_a = 0.5;
  p.sigma_max_u = 0.7;
  EXPECT_NEAR(p.d1(), 0.02 + (1 + 4.0) * 0.04, 1e-15);
  EXPECT_NEAR(p.d2(), 0.01 + 4.0 * 0.03, 1e-15);
  EXPECT_NEAR(p.l_a(), 0.5 * 0.16 / (0.1 * 0.12), 1e-12);
  EXPECT_NEAR(p.l_u(), 7.0, 1e-12);

  p.c1 = p.c2 = p.c3 = p.c4 = 0.0;
  p.kappa_a = V({3.0, 4.0});
  p.kappa_u = V({2.0});
  const Mat kp = Mat::Identity(1, 1), kd = Mat::Identity(1, 1);
  const ErrorBoundResult r = error_bound(p, kp, kd);
  EXPECT_NEAR(r.radius, r.p_norm * (p.l_a() * 5.0 + p.l_u() * 2.0) / 0.5, 1e-9);
}

TEST(ErrorBoundTest, NonHurwitzIsAnError) {
  EXPECT_THROW(error_bound(ErrorBoundParams{}, -Mat::Identity(2, 2), Mat::Identity(2, 2)),
               ControllabilityError);
  EXPECT_THROW(error_bound(ErrorBoundParams{}, Mat::Identity(2, 2), Mat::Zero(2, 2)),
               ControllabilityError);
  EXPECT_THROW(error_bound(ErrorBoundParams{}, Mat::Identity(2, 2), Mat::Identity(3, 3)),
               DimensionError);
}

TEST(ErrorBoundTest, LegSchedulesHurwitzOverVarianceRange) {
  const GainSchedule outer{15, 20, 3, 10, 1e-3, 1e6};
  const GainSchedule inner{400, 20, 60, 10, 1e-3, 1e6};
  ErrorBoundParams params;
  params.c2 = 1e-3;
  const BoundSweep sw = sweep_error_bound(params, outer, inner, 2, 1, 1.5, 31);
  EXPECT_TRUE(sw.hurwitz);
  EXPECT_LT(sw.max_real_eigenvalue, 0.0);
  EXPECT_EQ(sw.points, 31);
  EXPECT_GT(sw.radius, 0.0);
  EXPECT_TRUE(std::isfinite(sw.radius));
  EXPECT_THROW(sweep_error_bound(params, outer, inner, 2, 1, 1.5, 1), DimensionError);
}

TEST(ErrorBoundTest, BlockBoundsAtUpright) {
  const NominalModel nom = NominalModel::leg_default();
  ErrorBoundParams p;
  sample_block_bounds(nom, nom.partition(), point_region(Vec::Zero(3), Vec::Zero(3)), p);
  // D_aa = [[0.15, 0.025], [0.025, 0.15]], D_uu = 0.1, D_ua^u = 0.05.
  EXPECT_NEAR(p.d_a1, 0.125, 1e-12);
  EXPECT_NEAR(p.d_a2, 0.175, 1e-12);
  EXPECT_NEAR(p.d_u1, 0.1, 1e-12);
  EXPECT_NEAR(p.d_u2, 0.1, 1e-12);
  EXPECT_NEAR(p.sigma1, 0.05, 1e-12);
  EXPECT_NEAR(p.sigma_m, 0.05, 1e-12);

  sample_block_bounds(nom, nom.partition(), SampleRegion::around_upright(3), p);
  EXPECT_LE(p.d_a1, p.d_a2);
  EXPECT_LE(p.sigma1, p.sigma_m);
  EXPECT_GT(p.sigma1, 0.0);
}

TEST(AffineEnvelopeTest, CoversEveryPoint) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x, y;
  for (int i = 0; i < 200; ++i) {
    x.push_back(u(rng));
    y.push_back(0.5 * x.back() + 0.1 * u(rng));
  }
  const AffineEnvelope env = fit_affine_envelope(x, y);
  EXPECT_NEAR(env.slope, 0.5, 0.05);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(y[i], env.slope * x[i] + env.offset + 1e-12);
  const AffineEnvelope capped = fit_affine_envelope(x, y, 0.2);
  EXPECT_DOUBLE_EQ(capped.slope, 0.2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LE(y[i], capped.slope * x[i] + capped.offset + 1e-12);
  }
  const AffineEnvelope down = fit_affine_envelope({0, 1, 2}, {2, 1, 0});
  EXPECT_EQ(down.slope, 0.0);
  EXPECT_DOUBLE_EQ(down.offset, 2.0);
  EXPECT_THROW(fit_affine_envelope({}, {}), DimensionError);
}

}  // namespace
}  // namespace balance
