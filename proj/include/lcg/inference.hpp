#pragma once

// Forward passes over a layered chain graph. Feed-forward propagates the
// expected features q = g(e) layer by layer; forward sampling replaces them
// with draws from each node's conditional; partially collapsed feed-forward
// (PCFF) mixes both per node. Dropout gates outgoing pairwise terms with
// auxiliary Bernoulli nodes (sampled in training, marginalized at test time).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcg/distributions.hpp"
#include "lcg/error.hpp"
#include "lcg/graph.hpp"
#include "lcg/rng.hpp"

namespace lcg {

enum class DropoutMode {
  Off,    ///< annotations ignored
  Test,   ///< auxiliary nodes marginalized: outgoing terms scaled by keep
  Train,  ///< auxiliary nodes sampled once per pass
};

/// Per-layer expected (or sampled) features and cached preactivations.
/// Matrices have rows(l) rows and one column per batch sample.
struct ActivationState {
  std::vector<Eigen::MatrixXd> q;
  std::vector<Eigen::MatrixXd> e;  ///< empty for input layers
  /// Features as seen by children after dropout gating; empty when equal to q.
  std::vector<Eigen::MatrixXd> gated;

  const Eigen::MatrixXd& output() const { return q.back(); }
  const Eigen::MatrixXd& outgoing(int l) const {
    const auto i = static_cast<std::size_t>(l);
    return gated[i].size() != 0 ? gated[i] : q[i];
  }
};

/// Stochastic decisions of one pass, sufficient to replay it exactly.
/// Matrices are N^l x batch.
struct StochasticMask {
  using FlagMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
  std::vector<FlagMatrix> sampled;        ///< 1 = uncollapsed; empty for input layers
  std::vector<Eigen::MatrixXd> noise;     ///< uniform (discrete) or N(0,1) (continuous); NaN if collapsed
  std::vector<Eigen::MatrixXd> dropout;   ///< 0/1 indicators; empty unless annotated and sampled

  long sampled_count() const {
    long n = 0;
    for (const auto& s : sampled) n += s.cast<long>().sum();
    return n;
  }
};

struct ForwardResult {
  ActivationState state;
  StochasticMask mask;
};

/// Controls a generic forward pass.
struct PassSettings {
  DropoutMode dropout = DropoutMode::Off;
  /// Probability that a non-input node is sampled instead of collapsed.
  double sample_rate = 0.0;
  /// Keep the output layer collapsed regardless of sample_rate.
  bool collapse_output = false;
  std::uint64_t seed = 0;
  /// Pass index of batch column 0; column b uses first_pass + b.
  std::uint64_t first_pass = 0;
  /// Replays recorded decisions instead of drawing new ones.
  const StochasticMask* replay = nullptr;
};

namespace detail {

inline void check_input(const LayeredChainGraph& graph, const Eigen::MatrixXd& input) {
  if (input.rows() != graph.input_rows())
    throw ContractError("input has " + std::to_string(input.rows()) + " rows, graph expects " +
                        std::to_string(graph.input_rows()));
  if (input.cols() < 1) throw ContractError("empty input batch");
}

inline void check_replay(const LayeredChainGraph& graph, const StochasticMask& mask, Eigen::Index batch) {
  if (mask.sampled.size() != graph.layer_count() || mask.noise.size() != graph.layer_count() ||
      mask.dropout.size() != graph.layer_count())
    throw ContractError("stochastic mask does not match graph");
  for (int l = 0; l < static_cast<int>(graph.layer_count()); ++l) {
    const auto i = static_cast<std::size_t>(l);
    if (graph.layer(l).is_input) continue;
    if (mask.sampled[i].rows() != graph.layer(l).size || mask.sampled[i].cols() != batch)
      throw ContractError("stochastic mask shape mismatch at layer '" + graph.layer(l).id + "'");
  }
}

}  // namespace detail

/// Runs one batched forward pass under the given settings.
inline ForwardResult run_forward(const LayeredChainGraph& graph, const Eigen::MatrixXd& input,
                                 const PassSettings& settings) {
  detail::check_input(graph, input);
  if (!(settings.sample_rate >= 0.0 && settings.sample_rate <= 1.0))
    throw DomainError("sample rate must lie in [0, 1]");
  const Eigen::Index batch = input.cols();
  const std::size_t n_layers = graph.layer_count();
  if (settings.replay != nullptr) detail::check_replay(graph, *settings.replay, batch);

  ForwardResult out;
  auto& st = out.state;
  auto& mask = out.mask;
  st.q.resize(n_layers);
  st.e.resize(n_layers);
  st.gated.resize(n_layers);
  mask.sampled.resize(n_layers);
  mask.noise.resize(n_layers);
  mask.dropout.resize(n_layers);

  Eigen::Index input_row = 0;
  for (int l = 0; l < static_cast<int>(n_layers); ++l) {
    const auto li = static_cast<std::size_t>(l);
    const LayerSpec& layer = graph.layer(l);
    const int d = graph.dim(l);
    const std::int64_t node0 = graph.node_offset(l);

    if (layer.is_input) {
      st.q[li] = input.middleRows(input_row, graph.rows(l));
      input_row += graph.rows(l);
    } else {
      st.e[li] = preactivation_with(graph, l, [&st](int p) { return &st.outgoing(p); });
      activate_layer(layer.dist, st.e[li], st.q[li]);

      const bool may_sample = settings.replay != nullptr ||
                              (settings.sample_rate > 0.0 && !(settings.collapse_output && l == graph.output_layer()));
      if (may_sample) {
        auto& flags = mask.sampled[li];
        auto& noise = mask.noise[li];
        if (settings.replay != nullptr) {
          flags = settings.replay->sampled[li];
          noise = settings.replay->noise[li];
        } else {
          flags = StochasticMask::FlagMatrix::Zero(layer.size, batch);
          noise = Eigen::MatrixXd::Constant(layer.size, batch, std::numeric_limits<double>::quiet_NaN());
          for (Eigen::Index b = 0; b < batch; ++b) {
            const std::uint64_t pass = settings.first_pass + static_cast<std::uint64_t>(b);
            for (int i = 0; i < layer.size; ++i) {
              const auto node = static_cast<std::uint64_t>(node0 + i);
              const bool pick = settings.sample_rate >= 1.0 ||
                                Rng::stream(settings.seed, pass, node, StreamTag::PcffSelect).uniform() <
                                    settings.sample_rate;
              if (!pick) continue;
              flags(i, b) = 1;
              Rng rng = Rng::stream(settings.seed, pass, node, StreamTag::Noise);
              noise(i, b) = draw_noise(layer.dist, rng);
            }
          }
        }
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int i = 0; i < layer.size; ++i) {
            if (flags(i, b) == 0) continue;
            const auto e_node = st.e[li].col(b).segment(i * d, d);
            st.q[li].col(b).segment(i * d, d) = features(layer.dist, sample_from_noise(layer.dist, e_node, noise(i, b)));
          }
        }
      } else {
        mask.sampled[li] = StochasticMask::FlagMatrix::Zero(layer.size, batch);
        mask.noise[li] = Eigen::MatrixXd::Constant(layer.size, batch, std::numeric_limits<double>::quiet_NaN());
      }
    }

    if (!layer.dropout_keep || settings.dropout == DropoutMode::Off) continue;
    const double keep = *layer.dropout_keep;
    if (settings.dropout == DropoutMode::Test) {
      st.gated[li] = keep * st.q[li];
      continue;
    }
    auto& drop = mask.dropout[li];
    if (settings.replay != nullptr && settings.replay->dropout[li].size() != 0) {
      drop = settings.replay->dropout[li];
    } else {
      drop.resize(layer.size, batch);
      for (Eigen::Index b = 0; b < batch; ++b) {
        const std::uint64_t pass = settings.first_pass + static_cast<std::uint64_t>(b);
        for (int i = 0; i < layer.size; ++i)
          drop(i, b) = Rng::stream(settings.seed, pass, static_cast<std::uint64_t>(node0 + i), StreamTag::Dropout)
                               .uniform() < keep
                           ? 1.0
                           : 0.0;
      }
    }
    st.gated[li] = st.q[li];
    if (d == 1) {
      st.gated[li].array() *= drop.array();
    } else {
      for (int i = 0; i < layer.size; ++i)
        st.gated[li].middleRows(i * d, d).array().rowwise() *= drop.row(i).array();
    }
  }
  return out;
}

/// Deterministic feed-forward: q^l = g^l(e^l(parent q)). dropout may be Off or Test.
inline ActivationState feed_forward(const LayeredChainGraph& graph, const Eigen::MatrixXd& input,
                                    DropoutMode dropout = DropoutMode::Off) {
  if (dropout == DropoutMode::Train) throw ContractError("feed_forward is deterministic; use dropout_forward_train");
  PassSettings s;
  s.dropout = dropout;
  return run_forward(graph, input, s).state;
}

/// Ancestral sampling: every non-input node drawn from its conditional given
/// its sampled parents. Continuous nodes record their reparameterization noise.
inline ForwardResult forward_sample(const LayeredChainGraph& graph, const Eigen::MatrixXd& input, std::uint64_t seed,
                                    std::uint64_t pass = 0) {
  PassSettings s;
  s.sample_rate = 1.0;
  s.seed = seed;
  s.first_pass = pass;
  return run_forward(graph, input, s);
}

/// Partially collapsed feed-forward: each non-input node is sampled with
/// probability rate and collapsed to its expected features otherwise.
inline ForwardResult pcff_forward(const LayeredChainGraph& graph, const Eigen::MatrixXd& input, double rate,
                                  std::uint64_t seed, std::uint64_t pass = 0, bool collapse_output = false) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw DomainError("PCFF sample rate must lie in [0, 1]");
  PassSettings s;
  s.sample_rate = rate;
  s.collapse_output = collapse_output;
  s.seed = seed;
  s.first_pass = pass;
  return run_forward(graph, input, s);
}

/// Training-time dropout: one Bernoulli(keep) indicator per annotated node per pass.
inline ForwardResult dropout_forward_train(const LayeredChainGraph& graph, const Eigen::MatrixXd& input,
                                           std::uint64_t seed, std::uint64_t pass = 0) {
  PassSettings s;
  s.dropout = DropoutMode::Train;
  s.seed = seed;
  s.first_pass = pass;
  return run_forward(graph, input, s);
}

/// Re-runs a pass with the decisions and noise recorded in mask.
inline ForwardResult replay_forward(const LayeredChainGraph& graph, const Eigen::MatrixXd& input,
                                    const StochasticMask& mask, DropoutMode dropout = DropoutMode::Off) {
  PassSettings s;
  s.dropout = dropout;
  s.replay = &mask;
  return run_forward(graph, input, s);
}

// ---------------------------------------------------------------------------
// exact marginals by enumeration

struct NodeMarginal {
  Eigen::VectorXd table;      ///< P(X = k-th support value)
  FeatureVector exact_mean;
  FeatureVector feed_forward_mean;
  double abs_error = 0.0;     ///< max |exact - feed-forward| over features
};

struct MarginalReport {
  std::vector<std::vector<NodeMarginal>> layers;  ///< empty entries for the input layer
  double max_abs_error = 0.0;
};

namespace detail {

inline int support_size(const NodeDistribution& dist) {
  if (const auto* m = std::get_if<Multilabel>(&dist)) return m->classes;
  return 2;
}

// Features of the k-th support value of one node, written into out.
inline void support_features(const NodeDistribution& dist, int k, Eigen::Ref<Eigen::VectorXd> out) {
  if (const auto* b = std::get_if<Binary>(&dist)) {
    out(0) = k == 0 ? b->alpha : b->beta;
  } else {
    out.setZero();
    out(k) = 1.0;
  }
}

// Conditional probabilities of each support value of one node given e.
inline Eigen::VectorXd conditional_table(const NodeDistribution& dist, const Eigen::Ref<const Eigen::VectorXd>& e) {
  if (const auto* b = std::get_if<Binary>(&dist)) {
    Eigen::VectorXd p(2);
    p(1) = math::sigmoid((b->beta - b->alpha) * e(0));
    p(0) = math::sigmoid((b->alpha - b->beta) * e(0));
    return p;
  }
  return activation_mean(dist, e);
}

inline constexpr double kMaxLayerStates = 1 << 20;

}  // namespace detail

/// Exact per-node marginals of a sequential discrete graph, obtained by
/// propagating the joint distribution over each layer's configurations, next
/// to the feed-forward approximation of the same quantities.
inline MarginalReport exact_marginals(const LayeredChainGraph& graph, const Eigen::VectorXd& input) {
  const int n_layers = static_cast<int>(graph.layer_count());
  if (graph.input_layers().size() != 1 || graph.input_layers()[0] != 0)
    throw UnsupportedError("exact marginals need a single input layer in first position");
  for (int l = 1; l < n_layers; ++l) {
    const auto parents = graph.parents(l);
    if (parents.size() != 1 || graph.parent_layer(parents[0]) != l - 1)
      throw UnsupportedError("exact marginals need a sequential graph; layer '" + graph.layer(l).id +
                             "' has other parents than its predecessor");
    if (!is_discrete(graph.layer(l).dist))
      throw UnsupportedError("exact marginals need discrete nodes; layer '" + graph.layer(l).id + "' is continuous");
    const double states = std::pow(detail::support_size(graph.layer(l).dist), graph.layer(l).size);
    if (states > detail::kMaxLayerStates)
      throw UnsupportedError("layer '" + graph.layer(l).id + "' has too many joint states");
  }
  const ActivationState ff = feed_forward(graph, input);

  MarginalReport report;
  report.layers.resize(static_cast<std::size_t>(n_layers));

  // distribution over configurations of the previous layer, and their features
  Eigen::VectorXd prev_prob = Eigen::VectorXd::Ones(1);
  Eigen::MatrixXd prev_features = input;  // rows(l-1) x configs

  for (int l = 1; l < n_layers; ++l) {
    const LayerSpec& layer = graph.layer(l);
    const int n = layer.size;
    const int d = graph.dim(l);
    const int radix = detail::support_size(layer.dist);
    Eigen::Index configs = 1;
    for (int i = 0; i < n; ++i) configs *= radix;

    // preactivations for every parent configuration at once
    std::vector<Eigen::MatrixXd> parent_q(static_cast<std::size_t>(n_layers));
    parent_q[static_cast<std::size_t>(l - 1)] = prev_features;
    const Eigen::MatrixXd e_all = preactivation(graph, l, parent_q);

    Eigen::VectorXd prob = Eigen::VectorXd::Zero(configs);
    Eigen::VectorXd joint(configs);
    for (Eigen::Index pc = 0; pc < prev_prob.size(); ++pc) {
      if (prev_prob(pc) == 0.0) continue;
      // product of independent node conditionals, node 0 least significant
      joint.head(1).setConstant(prev_prob(pc));
      Eigen::Index filled = 1;
      for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd table = detail::conditional_table(layer.dist, e_all.col(pc).segment(i * d, d));
        for (int k = radix - 1; k >= 0; --k) joint.segment(k * filled, filled) = joint.head(filled) * table(k);
        filled *= radix;
      }
      prob += joint;
    }

    Eigen::MatrixXd feats(graph.rows(l), configs);
    auto& nodes = report.layers[static_cast<std::size_t>(l)];
    nodes.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      nodes[static_cast<std::size_t>(i)].table = Eigen::VectorXd::Zero(radix);
    }
    for (Eigen::Index c = 0; c < configs; ++c) {
      Eigen::Index rest = c;
      for (int i = 0; i < n; ++i) {
        const int k = static_cast<int>(rest % radix);
        rest /= radix;
        detail::support_features(layer.dist, k, feats.col(c).segment(i * d, d));
        nodes[static_cast<std::size_t>(i)].table(k) += prob(c);
      }
    }
    for (int i = 0; i < n; ++i) {
      auto& node = nodes[static_cast<std::size_t>(i)];
      node.exact_mean = FeatureVector::Zero(d);
      for (int k = 0; k < radix; ++k) {
        FeatureVector t(d);
        detail::support_features(layer.dist, k, t);
        node.exact_mean += node.table(k) * t;
      }
      node.feed_forward_mean = ff.q[static_cast<std::size_t>(l)].col(0).segment(i * d, d);
      node.abs_error = (node.exact_mean - node.feed_forward_mean).cwiseAbs().maxCoeff();
      report.max_abs_error = std::max(report.max_abs_error, node.abs_error);
    }
    prev_prob = std::move(prob);
    prev_features = std::move(feats);
  }
  return report;
}

}  // namespace lcg
