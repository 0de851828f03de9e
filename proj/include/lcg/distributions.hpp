#pragma once

// Node distribution families of a layered chain graph and the quantities
// feed-forward inference needs from them: feature functions, closed-form
// expected features (the activation g), Jacobians and samplers.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <variant>

#include "lcg/error.hpp"
#include "lcg/rng.hpp"

namespace lcg {

/// Two-valued node X in {alpha, beta} with P(X = x) proportional to exp(x * e).
struct Binary {
  double alpha = 0.0;
  double beta = 1.0;
  bool operator==(const Binary&) const = default;
};

/// Categorical node over labels 1..classes with one-hot features.
struct Multilabel {
  int classes = 2;
  bool operator==(const Multilabel&) const = default;
};

struct ConstantStd {
  double s = 1.0;
  bool operator==(const ConstantStd&) const = default;
};

/// s(e) = |tanh(e)|.
struct TanhModulatedStd {
  bool operator==(const TanhModulatedStd&) const = default;
};

using StdPolicy = std::variant<ConstantStd, TanhModulatedStd>;

/// X = max(leak * Y, Y) with Y ~ N(e, s(e)^2).
struct RectifiedGaussian {
  double leak = 0.0;
  StdPolicy std_policy = ConstantStd{};
  bool operator==(const RectifiedGaussian&) const = default;
};

using NodeDistribution = std::variant<Binary, Multilabel, RectifiedGaussian>;

/// Expected (or sampled) feature vector of one node.
using FeatureVector = Eigen::VectorXd;

/// Raw node value: the outcome for Binary, the 1-based label for
/// Multilabel, the real value for RectifiedGaussian.
using NodeValue = double;

/// Constant standard deviation for which the no-leak rectified Gaussian mean
/// best matches softplus in the max-norm.
inline constexpr double kSoftplusStd = 1.776091849725427;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// ---------------------------------------------------------------------------
// scalar helpers

namespace math {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

inline double normal_pdf(double u) { return std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi); }

inline double normal_cdf(double u) { return 0.5 * std::erfc(-u / std::numbers::sqrt2); }

}  // namespace math

// ---------------------------------------------------------------------------
// validation and shapes

/// Returns a description of the first violated invariant, if any.
inline std::optional<std::string> check_distribution(const NodeDistribution& dist) {
  return std::visit(
      Overloaded{
          [](const Binary& b) -> std::optional<std::string> {
            if (!std::isfinite(b.alpha) || !std::isfinite(b.beta)) return "binary values must be finite";
            if (b.alpha == b.beta) return "binary distribution needs alpha != beta";
            return std::nullopt;
          },
          [](const Multilabel& m) -> std::optional<std::string> {
            if (m.classes < 2) return "multilabel distribution needs at least 2 classes";
            return std::nullopt;
          },
          [](const RectifiedGaussian& r) -> std::optional<std::string> {
            if (!(r.leak >= 0.0 && r.leak <= 1.0)) return "rectified gaussian leak must lie in [0, 1]";
            if (const auto* c = std::get_if<ConstantStd>(&r.std_policy); c && !(c->s > 0.0))
              return "rectified gaussian constant std must be positive";
            return std::nullopt;
          },
      },
      dist);
}

inline int feature_dim(const NodeDistribution& dist) {
  if (const auto* m = std::get_if<Multilabel>(&dist)) return m->classes;
  return 1;
}

inline bool is_discrete(const NodeDistribution& dist) { return !std::holds_alternative<RectifiedGaussian>(dist); }

inline std::string describe(const NodeDistribution& dist) {
  return std::visit(Overloaded{
                        [](const Binary& b) {
                          return "binary{" + std::to_string(b.alpha) + "," + std::to_string(b.beta) + "}";
                        },
                        [](const Multilabel& m) { return "multilabel{" + std::to_string(m.classes) + "}"; },
                        [](const RectifiedGaussian& r) {
                          std::string s = "rectified_gaussian{leak=" + std::to_string(r.leak) + ",";
                          if (const auto* c = std::get_if<ConstantStd>(&r.std_policy))
                            s += "s=" + std::to_string(c->s);
                          else
                            s += "s=|tanh(e)|";
                          return s + "}";
                        },
                    },
                    dist);
}

/// Feature function T(x).
inline FeatureVector features(const NodeDistribution& dist, NodeValue x) {
  return std::visit(
      Overloaded{
          [x](const Binary& b) -> FeatureVector {
            if (x != b.alpha && x != b.beta) throw DomainError("value outside binary support");
            return FeatureVector::Constant(1, x);
          },
          [x](const Multilabel& m) -> FeatureVector {
            if (x != std::floor(x) || x < 1.0 || x > m.classes)
              throw DomainError("label outside 1.." + std::to_string(m.classes));
            FeatureVector t = FeatureVector::Zero(m.classes);
            t(static_cast<int>(x) - 1) = 1.0;
            return t;
          },
          [x](const RectifiedGaussian& r) -> FeatureVector {
            if (!std::isfinite(x)) throw DomainError("rectified gaussian value must be finite");
            if (r.leak == 0.0 && x < 0.0) throw DomainError("negative value outside rectified support");
            return FeatureVector::Constant(1, x);
          },
      },
      dist);
}

// ---------------------------------------------------------------------------
// binary and rectified gaussian scalar kernels

namespace detail {

inline double binary_mean(const Binary& b, double e) {
  const double half = 0.5 * (b.beta - b.alpha);
  return half * std::tanh(half * e) + 0.5 * (b.alpha + b.beta);
}

inline double binary_derivative(const Binary& b, double e) {
  const double half = 0.5 * (b.beta - b.alpha);
  const double t = std::tanh(half * e);
  return half * half * (1.0 - t * t);
}

inline double rect_std(const RectifiedGaussian& r, double e) {
  if (const auto* c = std::get_if<ConstantStd>(&r.std_policy)) return c->s;
  return std::abs(std::tanh(e));
}

// ds/de; right-hand limit at the kink of |tanh|.
inline double rect_std_derivative(const RectifiedGaussian& r, double e) {
  if (std::holds_alternative<ConstantStd>(r.std_policy)) return 0.0;
  const double t = std::tanh(e);
  return (e < 0.0 ? -1.0 : 1.0) * (1.0 - t * t);
}

// E[max(leak*Y, Y)] = leak*e + (1-leak) * E[max(0, Y)].
inline double rect_mean(const RectifiedGaussian& r, double e) {
  const double s = rect_std(r, e);
  double positive_part;
  if (s == 0.0) {
    positive_part = e > 0.0 ? e : 0.0;
  } else {
    const double u = e / s;
    positive_part = e * math::normal_cdf(u) + s * math::normal_pdf(u);
  }
  return r.leak * e + (1.0 - r.leak) * positive_part;
}

// d/de [e Phi(e/s) + s phi(e/s)] = Phi(u) + phi(u) * s'(e).
inline double rect_derivative(const RectifiedGaussian& r, double e) {
  const double s = rect_std(r, e);
  double positive_slope;
  if (s == 0.0) {
    if (std::holds_alternative<TanhModulatedStd>(r.std_policy))
      positive_slope = math::normal_cdf(1.0) + math::normal_pdf(1.0);  // e -> 0+, u -> 1
    else
      positive_slope = e >= 0.0 ? 1.0 : 0.0;
  } else {
    const double u = e / s;
    positive_slope = math::normal_cdf(u) + math::normal_pdf(u) * rect_std_derivative(r, e);
  }
  return r.leak + (1.0 - r.leak) * positive_slope;
}

inline void require_finite(const Eigen::Ref<const Eigen::VectorXd>& e) {
  if (!e.allFinite()) throw NumericError("non-finite preactivation");
}

inline void require_dim(const NodeDistribution& dist, Eigen::Index n) {
  if (n != feature_dim(dist))
    throw ContractError("preactivation has dimension " + std::to_string(n) + ", expected " +
                        std::to_string(feature_dim(dist)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// node-level operations

/// Closed-form expected features g(e) of a single node.
inline FeatureVector activation_mean(const NodeDistribution& dist, const Eigen::Ref<const Eigen::VectorXd>& e) {
  detail::require_dim(dist, e.size());
  detail::require_finite(e);
  return std::visit(Overloaded{
                        [&](const Binary& b) -> FeatureVector {
                          return FeatureVector::Constant(1, detail::binary_mean(b, e(0)));
                        },
                        [&](const Multilabel&) -> FeatureVector {
                          FeatureVector z = (e.array() - e.maxCoeff()).exp();
                          return z / z.sum();
                        },
                        [&](const RectifiedGaussian& r) -> FeatureVector {
                          return FeatureVector::Constant(1, detail::rect_mean(r, e(0)));
                        },
                    },
                    dist);
}

inline double activation_mean(const NodeDistribution& dist, double e) {
  return activation_mean(dist, Eigen::VectorXd::Constant(1, e))(0);
}

/// dg/de as a feature_dim x feature_dim matrix.
inline Eigen::MatrixXd activation_jacobian(const NodeDistribution& dist,
                                           const Eigen::Ref<const Eigen::VectorXd>& e) {
  detail::require_dim(dist, e.size());
  detail::require_finite(e);
  return std::visit(Overloaded{
                        [&](const Binary& b) -> Eigen::MatrixXd {
                          return Eigen::MatrixXd::Constant(1, 1, detail::binary_derivative(b, e(0)));
                        },
                        [&](const Multilabel& m) -> Eigen::MatrixXd {
                          const FeatureVector p = activation_mean(m, e);
                          Eigen::MatrixXd jac = -p * p.transpose();
                          jac.diagonal() += p;
                          return jac;
                        },
                        [&](const RectifiedGaussian& r) -> Eigen::MatrixXd {
                          return Eigen::MatrixXd::Constant(1, 1, detail::rect_derivative(r, e(0)));
                        },
                    },
                    dist);
}

/// Draws the exogenous noise a node consumes: a uniform in [0, 1) for
/// discrete families, a standard normal for the rectified Gaussian.
inline double draw_noise(const NodeDistribution& dist, Rng& rng) {
  if (is_discrete(dist)) return rng.uniform();
  std::normal_distribution<double> normal(0.0, 1.0);
  return normal(rng);
}

struct ReparamSample {
  double value = 0.0;
  double derivative = 0.0;  ///< dx/de with the noise held fixed
};

/// Pathwise sample x = max(leak*y, y), y = e + s(e) z, and its derivative in e.
inline ReparamSample sample_reparam(const NodeDistribution& dist, double e, double z) {
  const auto* r = std::get_if<RectifiedGaussian>(&dist);
  if (r == nullptr) throw UnsupportedError("reparameterized sampling needs a rectified gaussian node");
  if (!std::isfinite(e)) throw NumericError("non-finite preactivation");
  const double y = e + detail::rect_std(*r, e) * z;
  const double slope = y < 0.0 ? r->leak : 1.0;
  return {y < 0.0 ? r->leak * y : y, slope * (1.0 + detail::rect_std_derivative(*r, e) * z)};
}

/// Deterministic node draw given its noise (see draw_noise).
inline NodeValue sample_from_noise(const NodeDistribution& dist, const Eigen::Ref<const Eigen::VectorXd>& e,
                                   double noise) {
  return std::visit(Overloaded{
                        [&](const Binary& b) -> NodeValue {
                          return noise < math::sigmoid((b.beta - b.alpha) * e(0)) ? b.beta : b.alpha;
                        },
                        [&](const Multilabel& m) -> NodeValue {
                          const FeatureVector p = activation_mean(m, e);
                          double acc = 0.0;
                          for (int k = 0; k < m.classes; ++k) {
                            acc += p(k);
                            if (noise < acc) return k + 1;
                          }
                          return m.classes;
                        },
                        [&](const RectifiedGaussian&) -> NodeValue { return sample_reparam(dist, e(0), noise).value; },
                    },
                    dist);
}

/// One draw from the node's conditional distribution given preactivation e.
inline NodeValue sample(const NodeDistribution& dist, const Eigen::Ref<const Eigen::VectorXd>& e, Rng& rng) {
  detail::require_dim(dist, e.size());
  detail::require_finite(e);
  return sample_from_noise(dist, e, draw_noise(dist, rng));
}

struct McEstimate {
  FeatureVector mean;
  FeatureVector variance;  ///< unbiased sample variance; empty when n == 1
  std::optional<FeatureVector> standard_error;  ///< absent when n == 1
};

/// Monte-Carlo estimate of the expected features from n draws of sample().
inline McEstimate mc_activation_estimate(const NodeDistribution& dist, const Eigen::Ref<const Eigen::VectorXd>& e,
                                         long n, Rng& rng) {
  if (n < 1) throw DomainError("sample count must be at least 1");
  const int d = feature_dim(dist);
  // Welford accumulation
  FeatureVector mean = FeatureVector::Zero(d);
  FeatureVector m2 = FeatureVector::Zero(d);
  for (long k = 1; k <= n; ++k) {
    const FeatureVector t = features(dist, sample(dist, e, rng));
    const FeatureVector delta = t - mean;
    mean += delta / static_cast<double>(k);
    m2 += delta.cwiseProduct(t - mean);
  }
  McEstimate est{mean, FeatureVector{}, std::nullopt};
  if (n > 1) {
    est.variance = m2 / static_cast<double>(n - 1);
    est.standard_error = (est.variance / static_cast<double>(n)).cwiseSqrt();
  }
  return est;
}

// ---------------------------------------------------------------------------
// layer-level kernels
//
// A layer state is a matrix with N*d rows (node-major, d features per node)
// and one column per batch sample.

/// q = g(e) applied node by node.
inline void activate_layer(const NodeDistribution& dist, const Eigen::MatrixXd& e, Eigen::MatrixXd& q) {
  q.resize(e.rows(), e.cols());
  std::visit(Overloaded{
                 [&](const Binary& b) {
                   const double half = 0.5 * (b.beta - b.alpha);
                   const double mid = 0.5 * (b.alpha + b.beta);
                   q = ((e.array() * half).tanh() * half + mid).matrix();
                 },
                 [&](const Multilabel& m) {
                   const int c = m.classes;
                   for (Eigen::Index col = 0; col < e.cols(); ++col) {
                     for (Eigen::Index row = 0; row < e.rows(); row += c) {
                       auto block = e.col(col).segment(row, c);
                       auto out = q.col(col).segment(row, c);
                       out = (block.array() - block.maxCoeff()).exp().matrix();
                       out /= out.sum();
                     }
                   }
                 },
                 [&](const RectifiedGaussian& r) { q = e.unaryExpr([&r](double v) { return detail::rect_mean(r, v); }); },
             },
             dist);
}

/// Vector-Jacobian product of the activation: returns J(e)^T * dq per node.
inline Eigen::MatrixXd activation_vjp(const NodeDistribution& dist, const Eigen::MatrixXd& e, const Eigen::MatrixXd& dq) {
  return std::visit(Overloaded{
                        [&](const Binary& b) -> Eigen::MatrixXd {
                          const double half = 0.5 * (b.beta - b.alpha);
                          const Eigen::ArrayXXd t = (e.array() * half).tanh();
                          return (half * half * (1.0 - t.square()) * dq.array()).matrix();
                        },
                        [&](const Multilabel& m) -> Eigen::MatrixXd {
                          const int c = m.classes;
                          Eigen::MatrixXd de(e.rows(), e.cols());
                          Eigen::VectorXd p(c);
                          for (Eigen::Index col = 0; col < e.cols(); ++col) {
                            for (Eigen::Index row = 0; row < e.rows(); row += c) {
                              const auto block = e.col(col).segment(row, c);
                              p = (block.array() - block.maxCoeff()).exp().matrix();
                              p /= p.sum();
                              const auto g = dq.col(col).segment(row, c);
                              de.col(col).segment(row, c) = p.cwiseProduct((g.array() - p.dot(g)).matrix());
                            }
                          }
                          return de;
                        },
                        [&](const RectifiedGaussian& r) -> Eigen::MatrixXd {
                          return e.unaryExpr([&r](double v) { return detail::rect_derivative(r, v); }).cwiseProduct(dq);
                        },
                    },
                    dist);
}

}  // namespace lcg
