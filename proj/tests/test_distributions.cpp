#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lcg/distributions.hpp"
#include "test_util.hpp"

using namespace lcg;
using lcg::test::rel_error;
using lcg::test::scalar_families;

TEST(Validation, RejectsInvalidParameters) {
  EXPECT_TRUE(check_distribution(Binary{1.0, 1.0}).has_value());
  EXPECT_TRUE(check_distribution(Multilabel{1}).has_value());
  EXPECT_TRUE(check_distribution(RectifiedGaussian{1.5, TanhModulatedStd{}}).has_value());
  EXPECT_TRUE(check_distribution(RectifiedGaussian{-0.1, TanhModulatedStd{}}).has_value());
  EXPECT_TRUE(check_distribution(RectifiedGaussian{0.0, ConstantStd{0.0}}).has_value());
  EXPECT_FALSE(check_distribution(Binary{0.0, 1.0}).has_value());
  EXPECT_FALSE(check_distribution(Multilabel{2}).has_value());
  EXPECT_FALSE(check_distribution(RectifiedGaussian{1.0, ConstantStd{0.1}}).has_value());
}

TEST(FeatureDim, PerFamily) {
  EXPECT_EQ(feature_dim(Binary{0.0, 1.0}), 1);
  EXPECT_EQ(feature_dim(Multilabel{10}), 10);
  EXPECT_EQ(feature_dim(RectifiedGaussian{0.0, ConstantStd{1.0}}), 1);
}

TEST(Features, Examples) {
  EXPECT_EQ(features(Binary{-1.0, 1.0}, 1.0)(0), 1.0);
  const FeatureVector one_hot = features(Multilabel{3}, 2);
  ASSERT_EQ(one_hot.size(), 3);
  EXPECT_EQ(one_hot, Eigen::Vector3d(0.0, 1.0, 0.0));
  EXPECT_EQ(features(RectifiedGaussian{0.0, ConstantStd{1.0}}, 2.5)(0), 2.5);
}

TEST(Features, OutsideSupportThrows) {
  EXPECT_THROW(features(Multilabel{3}, 4), DomainError);
  EXPECT_THROW(features(Multilabel{3}, 0), DomainError);
  EXPECT_THROW(features(Binary{0.0, 1.0}, 0.5), DomainError);
  EXPECT_THROW(features(RectifiedGaussian{0.0, ConstantStd{1.0}}, -1.0), DomainError);
  EXPECT_NO_THROW(features(RectifiedGaussian{0.5, ConstantStd{1.0}}, -1.0));
}

TEST(ActivationMean, Examples) {
  EXPECT_DOUBLE_EQ(activation_mean(Binary{0.0, 1.0}, 0.0), 0.5);
  EXPECT_NEAR(activation_mean(Binary{0.0, 1.0}, std::log(3.0)), 0.75, 1e-15);
  const FeatureVector p = activation_mean(Multilabel{4}, Eigen::Vector4d::Zero());
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p(i), 0.25);
  // s * phi(0) = s / sqrt(2 pi)
  const double softplus0 = activation_mean(RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}}, 0.0);
  EXPECT_NEAR(softplus0, kSoftplusStd / std::sqrt(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(softplus0, 0.7086, 5e-5);
  EXPECT_EQ(activation_mean(RectifiedGaussian{0.0, TanhModulatedStd{}}, 0.0), 0.0);
}

TEST(ActivationMean, NonFiniteThrows) {
  EXPECT_THROW(activation_mean(Binary{0.0, 1.0}, std::nan("")), NumericError);
  EXPECT_THROW(activation_mean(RectifiedGaussian{0.0, TanhModulatedStd{}}, INFINITY), NumericError);
}

TEST(ActivationMean, WrongDimensionThrows) {
  EXPECT_THROW(activation_mean(Multilabel{3}, Eigen::Vector2d::Zero()), ContractError);
}

TEST(ActivationMean, MatchesSigmoidTanhSoftmax) {
  for (double e = -10.0; e <= 10.0; e += 0.01) {
    EXPECT_NEAR(activation_mean(Binary{0.0, 1.0}, e), 1.0 / (1.0 + std::exp(-e)), 1e-12);
    EXPECT_NEAR(activation_mean(Binary{-1.0, 1.0}, e), std::tanh(e), 1e-12);
  }
}

TEST(ActivationMean, BinaryStrictlyInsideSupport) {
  const Binary b{-0.5, 2.0};
  for (double e = -30.0; e <= 30.0; e += 0.37) {
    const double g = activation_mean(b, e);
    EXPECT_GE(g, -0.5);
    EXPECT_LE(g, 2.0);
  }
  for (double e = -5.0; e <= 5.0; e += 0.1) {
    const double g = activation_mean(b, e);
    EXPECT_GT(g, -0.5);
    EXPECT_LT(g, 2.0);
  }
}

TEST(ActivationMean, SwappingAlphaBetaIsIdentical) {
  for (const auto& [a, b] : {std::pair{0.0, 1.0}, std::pair{-1.0, 1.0}, std::pair{2.0, -3.0}})
    for (double e = -6.0; e <= 6.0; e += 0.01)
      EXPECT_NEAR(activation_mean(Binary{a, b}, e), activation_mean(Binary{b, a}, e), 1e-12);
}

TEST(ActivationMean, SoftmaxSumsToOneAndIsShiftInvariant) {
  Rng rng = Rng::stream(11, 0, 0, StreamTag::Check);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd e(5);
    for (auto& v : e) v = normal(rng);
    const FeatureVector p = activation_mean(Multilabel{5}, e);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GT(p.minCoeff(), 0.0);
    const FeatureVector shifted = activation_mean(Multilabel{5}, (e.array() + 123.4).matrix());
    EXPECT_LE((p - shifted).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ActivationMean, SoftmaxOverflowSafe) {
  const FeatureVector p = activation_mean(Multilabel{3}, Eigen::Vector3d(1000.0, 999.0, -1000.0));
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p(0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(ActivationMean, SoftplusApproximation) {
  const NodeDistribution d = RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}};
  double worst = 0.0;
  for (int k = 0; k <= 1200; ++k) {
    const double e = -6.0 + 0.01 * k;
    worst = std::max(worst, std::abs(activation_mean(d, e) - std::log1p(std::exp(e))));
  }
  EXPECT_LE(worst, 0.05);
}

TEST(ActivationMean, ReluApproximation) {
  const NodeDistribution d = RectifiedGaussian{0.0, TanhModulatedStd{}};
  EXPECT_EQ(activation_mean(d, 0.0), 0.0);
  double worst = 0.0;
  for (int k = 0; k <= 500; ++k) {
    const double e = 1.0 + 0.01 * k;
    worst = std::max({worst, std::abs(activation_mean(d, e) - e), std::abs(activation_mean(d, -e))});
  }
  EXPECT_LE(worst, 0.05);
}

TEST(ActivationMean, LeakyReluApproximation) {
  const NodeDistribution d = RectifiedGaussian{1.0 / 3.0, TanhModulatedStd{}};
  double worst = 0.0;
  for (int k = 0; k <= 500; ++k) {
    const double e = 1.0 + 0.01 * k;
    worst = std::max({worst, std::abs(activation_mean(d, e) - e), std::abs(activation_mean(d, -e) + e / 3.0)});
  }
  EXPECT_LE(worst, 0.05);
}

TEST(ActivationMean, ScalarFamiliesMonotone) {
  const NodeDistribution relu = RectifiedGaussian{0.0, TanhModulatedStd{}};
  for (const auto& d : scalar_families()) {
    if (d == relu) continue;  // see ReluVariantDipsBelowZero
    // increasing for every family, including binary with beta < alpha
    double prev = activation_mean(d, -10.0);
    for (int k = 1; k <= 2000; ++k) {
      const double g = activation_mean(d, -10.0 + 0.01 * k);
      EXPECT_GE(g - prev, -1e-9) << describe(d) << " at e=" << -10.0 + 0.01 * k;
      prev = g;
    }
  }
}

// With s = |tanh e| and no leak, g is not monotone just below zero: the left
// derivative at 0 is Phi(-1) - phi(-1) < 0. The dip is confined to
// (-0.75, 0) and stays below the 0.05 ReLU approximation tolerance.
TEST(ActivationMean, ReluVariantDipsBelowZero) {
  const NodeDistribution d = RectifiedGaussian{0.0, TanhModulatedStd{}};
  EXPECT_NEAR(activation_jacobian(d, Eigen::VectorXd::Constant(1, -1e-9))(0, 0),
              math::normal_cdf(-1.0) - math::normal_pdf(-1.0), 1e-6);
  double prev = activation_mean(d, -10.0);
  double peak = 0.0;
  for (int k = 1; k <= 20000; ++k) {
    const double e = -10.0 + 1e-3 * k;
    const double g = activation_mean(d, e);
    if (e <= -0.75 || e > 0.0) EXPECT_GE(g - prev, -1e-12) << "e=" << e;
    if (e < 0.0) peak = std::max(peak, g);
    prev = g;
  }
  EXPECT_GT(peak, 0.03);
  EXPECT_LT(peak, 0.05);
  for (double leak : {0.1, 1.0 / 3.0}) {
    const NodeDistribution leaky = RectifiedGaussian{leak, TanhModulatedStd{}};
    for (double e = -2.0; e < 2.0; e += 1e-3) EXPECT_GE(activation_mean(leaky, e + 1e-3) - activation_mean(leaky, e), 0.0);
  }
}

TEST(ActivationJacobian, Examples) {
  EXPECT_DOUBLE_EQ(activation_jacobian(Binary{0.0, 1.0}, Eigen::VectorXd::Zero(1))(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(activation_jacobian(Binary{-1.0, 1.0}, Eigen::VectorXd::Zero(1))(0, 0), 1.0);
  const Eigen::MatrixXd j = activation_jacobian(Multilabel{2}, Eigen::Vector2d::Zero());
  EXPECT_DOUBLE_EQ(j(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(j(0, 1), -0.25);
  EXPECT_DOUBLE_EQ(j(1, 0), -0.25);
  EXPECT_DOUBLE_EQ(j(1, 1), 0.25);
}

TEST(ActivationJacobian, MatchesFiniteDifferences) {
  Rng rng = Rng::stream(5, 0, 0, StreamTag::Check);
  std::uniform_real_distribution<double> pick(-3.0, 3.0);
  const double h = 1e-5;
  for (const auto& d : scalar_families()) {
    for (int trial = 0; trial < 20; ++trial) {
      const double e = pick(rng);
      if (std::abs(e) < 1e-3) continue;  // |tanh e| has a kink at 0
      const double fd = (activation_mean(d, e + h) - activation_mean(d, e - h)) / (2.0 * h);
      const double an = activation_jacobian(d, Eigen::VectorXd::Constant(1, e))(0, 0);
      EXPECT_LE(rel_error(an, fd), 1e-6) << describe(d) << " at e=" << e;
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd e(4);
    for (auto& v : e) v = pick(rng);
    const Eigen::MatrixXd an = activation_jacobian(Multilabel{4}, e);
    for (int k = 0; k < 4; ++k) {
      Eigen::VectorXd up = e, down = e;
      up(k) += h;
      down(k) -= h;
      const Eigen::VectorXd fd = (activation_mean(Multilabel{4}, up) - activation_mean(Multilabel{4}, down)) / (2.0 * h);
      for (int i = 0; i < 4; ++i) EXPECT_LE(rel_error(an(i, k), fd(i)), 1e-6);
    }
  }
}

TEST(ActivationJacobian, TanhModulatedAtZeroUsesRightLimit) {
  const NodeDistribution d = RectifiedGaussian{0.0, TanhModulatedStd{}};
  const double at0 = activation_jacobian(d, Eigen::VectorXd::Zero(1))(0, 0);
  const double near0 = activation_jacobian(d, Eigen::VectorXd::Constant(1, 1e-9))(0, 0);
  EXPECT_NEAR(at0, near0, 1e-6);
}

TEST(Sample, SaturatedBinary) {
  Rng rng = Rng::stream(1, 0, 0, StreamTag::Check);
  for (int k = 0; k < 10000; ++k) EXPECT_EQ(sample(Binary{0.0, 1.0}, Eigen::VectorXd::Constant(1, 20.0), rng), 1.0);
}

TEST(Sample, DeterministicPerStream) {
  for (const auto& d : scalar_families()) {
    Rng a = Rng::stream(3, 1, 2, StreamTag::Noise);
    Rng b = Rng::stream(3, 1, 2, StreamTag::Noise);
    for (int k = 0; k < 10; ++k)
      EXPECT_EQ(sample(d, Eigen::VectorXd::Constant(1, 0.3), a), sample(d, Eigen::VectorXd::Constant(1, 0.3), b));
  }
}

TEST(Sample, MonteCarloMatchesActivationMean) {
  std::vector<NodeDistribution> all = scalar_families();
  all.push_back(Multilabel{3});
  int stream = 0;
  for (const auto& d : all) {
    for (double e : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
      Eigen::VectorXd pre = Eigen::VectorXd::Constant(1, e);
      if (feature_dim(d) == 3) pre = Eigen::Vector3d(e, 0.5, -0.25 * e);
      Rng rng = Rng::stream(21, static_cast<std::uint64_t>(stream++), 0, StreamTag::Check);
      const McEstimate mc = mc_activation_estimate(d, pre, 1'000'000, rng);
      const FeatureVector g = activation_mean(d, pre);
      ASSERT_TRUE(mc.standard_error.has_value());
      for (Eigen::Index i = 0; i < g.size(); ++i)
        EXPECT_LE(std::abs(mc.mean(i) - g(i)), 4.0 * (*mc.standard_error)(i) + 1e-12)
            << describe(d) << " at e=" << e;
    }
  }
}

TEST(McEstimate, SingleSampleHasNoStandardError) {
  const NodeDistribution d = RectifiedGaussian{0.0, ConstantStd{1.0}};
  Rng a = Rng::stream(4, 0, 0, StreamTag::Check);
  Rng b = Rng::stream(4, 0, 0, StreamTag::Check);
  const McEstimate mc = mc_activation_estimate(d, Eigen::VectorXd::Constant(1, 0.5), 1, a);
  EXPECT_FALSE(mc.standard_error.has_value());
  EXPECT_EQ(mc.mean(0), sample(d, Eigen::VectorXd::Constant(1, 0.5), b));
  EXPECT_THROW(mc_activation_estimate(d, Eigen::VectorXd::Constant(1, 0.5), 0, a), DomainError);
}

TEST(SampleReparam, IdentityLeak) {
  const NodeDistribution d = RectifiedGaussian{1.0, ConstantStd{0.8}};
  for (double z : {-2.0, -0.3, 0.0, 1.7}) {
    const ReparamSample s = sample_reparam(d, 0.4, z);
    EXPECT_DOUBLE_EQ(s.value, 0.4 + 0.8 * z);
    EXPECT_DOUBLE_EQ(s.derivative, 1.0);
  }
}

TEST(SampleReparam, NoiseFreeRectification) {
  const NodeDistribution d = RectifiedGaussian{0.0, ConstantStd{1.5}};
  for (double e : {-2.0, -0.1, 0.0, 0.1, 3.0}) EXPECT_EQ(sample_reparam(d, e, 0.0).value, std::max(0.0, e));
}

TEST(SampleReparam, KinkSubgradientIsOne) {
  EXPECT_EQ(sample_reparam(RectifiedGaussian{0.0, ConstantStd{1.0}}, 0.0, 0.0).derivative, 1.0);
}

TEST(SampleReparam, DerivativeMatchesFiniteDifferences) {
  Rng rng = Rng::stream(8, 0, 0, StreamTag::Check);
  std::uniform_real_distribution<double> pick(-3.0, 3.0);
  std::normal_distribution<double> normal;
  const double h = 1e-6;
  for (const auto& d : scalar_families()) {
    if (is_discrete(d)) continue;
    for (int trial = 0; trial < 40; ++trial) {
      const double e = pick(rng);
      const double z = normal(rng);
      const double y = sample_reparam(d, e, z).value;
      if (std::abs(y) < 1e-3 || std::abs(e) < 1e-3) continue;  // stay off the kinks
      const double fd = (sample_reparam(d, e + h, z).value - sample_reparam(d, e - h, z).value) / (2.0 * h);
      EXPECT_LE(rel_error(sample_reparam(d, e, z).derivative, fd), 1e-6) << describe(d) << " e=" << e << " z=" << z;
    }
  }
}

TEST(SampleReparam, DiscreteUnsupported) {
  EXPECT_THROW(sample_reparam(Binary{0.0, 1.0}, 0.0, 0.0), UnsupportedError);
  EXPECT_THROW(sample_reparam(Multilabel{3}, 0.0, 0.0), UnsupportedError);
}

TEST(LayerKernels, MatchNodeLevelOperations) {
  const NodeDistribution m = Multilabel{3};
  Eigen::MatrixXd e(6, 2);
  e << 0.1, -2.0, 0.5, 1.0, -0.3, 0.0, 2.0, -1.0, 0.0, 0.3, 1.0, 0.7;
  Eigen::MatrixXd q;
  activate_layer(m, e, q);
  for (int col = 0; col < 2; ++col)
    for (int node = 0; node < 2; ++node)
      EXPECT_LE((q.col(col).segment(3 * node, 3) - activation_mean(m, e.col(col).segment(3 * node, 3))).norm(), 1e-15);
  Eigen::MatrixXd dq = Eigen::MatrixXd::Random(6, 2);
  const Eigen::MatrixXd de = activation_vjp(m, e, dq);
  for (int col = 0; col < 2; ++col)
    for (int node = 0; node < 2; ++node) {
      const Eigen::MatrixXd j = activation_jacobian(m, e.col(col).segment(3 * node, 3));
      EXPECT_LE((de.col(col).segment(3 * node, 3) - j.transpose() * dq.col(col).segment(3 * node, 3)).norm(), 1e-14);
    }
  for (const auto& d : scalar_families()) {
    const Eigen::MatrixXd es = Eigen::MatrixXd::Random(4, 3) * 3.0;
    Eigen::MatrixXd qs;
    activate_layer(d, es, qs);
    const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(4, 3);
    const Eigen::MatrixXd ds = activation_vjp(d, es, ones);
    for (int i = 0; i < 4; ++i)
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(qs(i, c), activation_mean(d, es(i, c)), 1e-15);
        EXPECT_NEAR(ds(i, c), activation_jacobian(d, Eigen::VectorXd::Constant(1, es(i, c)))(0, 0), 1e-15);
      }
  }
}
