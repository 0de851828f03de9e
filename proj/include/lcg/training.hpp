#pragma once

// Losses on output-layer expected features, reverse-mode gradients through
// deterministic and stochastic passes, SGD with momentum, and the
// train / evaluate loops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "lcg/data.hpp"
#include "lcg/distributions.hpp"
#include "lcg/error.hpp"
#include "lcg/graph.hpp"
#include "lcg/inference.hpp"
#include "lcg/rng.hpp"

namespace lcg {

enum class LossKind { CrossEntropy, SquaredError };

struct LossSpec {
  LossKind kind = LossKind::CrossEntropy;
};

/// Checks that the graph's output layer supports the loss.
inline void check_loss(const LayeredChainGraph& graph, const LossSpec& loss) {
  const LayerSpec& out = graph.layer(graph.output_layer());
  if (loss.kind == LossKind::CrossEntropy && (!std::holds_alternative<Multilabel>(out.dist) || out.size != 1))
    throw ContractError("cross-entropy needs an output layer with one multilabel node");
  if (loss.kind == LossKind::SquaredError && feature_dim(out.dist) != 1)
    throw ContractError("squared error needs scalar-feature output nodes");
}

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& e) {
  const double m = e.maxCoeff();
  return m + std::log((e.array() - m).exp().sum());
}

inline Eigen::VectorXd one_hot(Eigen::Index n, int label) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(n);
  t(label) = 1.0;
  return t;
}

inline void check_label(Eigen::Index n, int label) {
  if (label < 0 || label >= n)
    throw DomainError("target label " + std::to_string(label) + " outside 0.." + std::to_string(n - 1));
}

}  // namespace detail

/// Loss of one sample given output expected features q and preactivations e.
/// Cross-entropy is -ln softmax(e)[label], evaluated with log-sum-exp; squared
/// error is ||q - onehot(label)||^2. Labels are 0-based.
inline double loss_eval(const LossSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& q,
                        const Eigen::Ref<const Eigen::VectorXd>& e, int label) {
  detail::check_label(q.size(), label);
  if (spec.kind == LossKind::CrossEntropy) return detail::log_sum_exp(e) - e(label);
  return (q - detail::one_hot(q.size(), label)).squaredNorm();
}

/// Squared error against an explicit target vector.
inline double loss_eval(const LossSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& q,
                        const Eigen::Ref<const Eigen::VectorXd>& target) {
  if (spec.kind != LossKind::SquaredError) throw ContractError("vector targets need the squared-error loss");
  if (q.size() != target.size()) throw ContractError("target dimension mismatch");
  return (q - target).squaredNorm();
}

/// Upstream gradient for backward(): either dL/dq^L or, for losses fused
/// with the output activation, dL/de^L.
struct OutputGradient {
  Eigen::MatrixXd grad;
  bool wrt_preactivation = false;
};

/// Per-sample loss gradients of a batch, each scaled by `scale`.
inline OutputGradient loss_gradient(const LossSpec& spec, const ActivationState& state, std::span<const int> labels,
                                    double scale = 1.0) {
  const Eigen::MatrixXd& q = state.output();
  OutputGradient g;
  if (spec.kind == LossKind::CrossEntropy) {
    const Eigen::MatrixXd& e = state.e.back();
    g.wrt_preactivation = true;
    g.grad.resize(e.rows(), e.cols());
    for (Eigen::Index b = 0; b < e.cols(); ++b) {
      detail::check_label(e.rows(), labels[static_cast<std::size_t>(b)]);
      Eigen::VectorXd p = (e.col(b).array() - e.col(b).maxCoeff()).exp();
      p /= p.sum();
      p(labels[static_cast<std::size_t>(b)]) -= 1.0;
      g.grad.col(b) = scale * p;
    }
  } else {
    g.grad.resize(q.rows(), q.cols());
    for (Eigen::Index b = 0; b < q.cols(); ++b) {
      detail::check_label(q.rows(), labels[static_cast<std::size_t>(b)]);
      g.grad.col(b) = 2.0 * scale * (q.col(b) - detail::one_hot(q.rows(), labels[static_cast<std::size_t>(b)]));
    }
  }
  return g;
}

/// Gradients congruent to ParameterStore::tensors; tied uses accumulate into one slot.
struct GradientSet {
  std::vector<Eigen::MatrixXd> tensors;

  static GradientSet zeros_like(const ParameterStore& store) {
    GradientSet g;
    g.tensors.reserve(store.tensors.size());
    for (const auto& t : store.tensors) g.tensors.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    return g;
  }
  double max_abs() const {
    double m = 0.0;
    for (const auto& t : tensors)
      if (t.size() != 0) m = std::max(m, t.cwiseAbs().maxCoeff());
    return m;
  }
};

/// Reverse sweep over the layers. Collapsed nodes use the activation
/// Jacobian; sampled continuous nodes the pathwise derivative with their
/// recorded noise; sampled discrete nodes stop the gradient. Dropout
/// indicators act as constants. Sums over the batch.
inline GradientSet backward(const LayeredChainGraph& graph, const ActivationState& state, const StochasticMask& mask,
                            const OutputGradient& upstream) {
  const int n_layers = static_cast<int>(graph.layer_count());
  if (state.q.size() != graph.layer_count() || state.e.size() != graph.layer_count() ||
      mask.sampled.size() != graph.layer_count())
    throw ContractError("activation state does not match graph");
  const Eigen::Index batch = state.output().cols();
  const int out = graph.output_layer();
  if (upstream.grad.rows() != graph.rows(out) || upstream.grad.cols() != batch)
    throw ContractError("upstream gradient shape mismatch");

  GradientSet grads = GradientSet::zeros_like(graph.params());
  std::vector<Eigen::MatrixXd> dq(graph.layer_count());
  for (int l = 0; l < n_layers; ++l)
    if (!graph.layer(l).is_input) dq[static_cast<std::size_t>(l)] = Eigen::MatrixXd::Zero(graph.rows(l), batch);
  if (!upstream.wrt_preactivation) dq[static_cast<std::size_t>(out)] = upstream.grad;

  for (int l = n_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const LayerSpec& layer = graph.layer(l);
    if (layer.is_input) continue;
    const int d = graph.dim(l);
    const Eigen::MatrixXd& e = state.e[li];

    Eigen::MatrixXd de;
    if (l == out && upstream.wrt_preactivation) {
      de = upstream.grad;
    } else {
      de = activation_vjp(layer.dist, e, dq[li]);
      const auto& flags = mask.sampled[li];
      if (flags.size() != 0 && flags.cast<int>().sum() > 0) {
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int i = 0; i < layer.size; ++i) {
            if (flags(i, b) == 0) continue;
            if (is_discrete(layer.dist)) {
              de.col(b).segment(i * d, d).setZero();
            } else {
              de(i, b) = sample_reparam(layer.dist, e(i, b), mask.noise[li](i, b)).derivative * dq[li](i, b);
            }
          }
        }
      }
    }

    grads.tensors[static_cast<std::size_t>(graph.params().bias_slot[li])] += de.rowwise().sum();

    for (int k : graph.parents(l)) {
      const int p = graph.parent_layer(k);
      const auto pi = static_cast<std::size_t>(p);
      const Eigen::MatrixXd& x = state.outgoing(p);
      const auto slot = static_cast<std::size_t>(graph.params().weight_slot[static_cast<std::size_t>(k)]);
      Eigen::MatrixXd masked;
      if (graph.connection(k).pattern == Pattern::Masked)
        masked = graph.weight(k).cwiseProduct(graph.params().structure[slot]);
      const Eigen::MatrixXd& w = masked.size() != 0 ? masked : graph.weight(k);
      const bool diagonal = graph.connection(k).pattern == Pattern::Diagonal;
      const int dp = graph.dim(p);
      const int np = graph.layer(p).size;

      if (!diagonal) {
        grads.tensors[slot].noalias() += de * x.transpose();
      } else {
        for (int i = 0; i < np; ++i)
          grads.tensors[slot].middleCols(i * dp, dp).noalias() +=
              de.middleRows(i * d, d) * x.middleRows(i * dp, dp).transpose();
      }
      if (graph.layer(p).is_input) continue;

      Eigen::MatrixXd dx;
      if (!diagonal) {
        dx.noalias() = w.transpose() * de;
      } else {
        dx.resize(graph.rows(p), batch);
        for (int i = 0; i < np; ++i)
          dx.middleRows(i * dp, dp).noalias() = w.middleCols(i * dp, dp).transpose() * de.middleRows(i * d, d);
      }
      // gating by the auxiliary dropout nodes
      if (state.gated[pi].size() != 0) {
        if (mask.dropout[pi].size() != 0) {
          for (int i = 0; i < np; ++i) dx.middleRows(i * dp, dp).array().rowwise() *= mask.dropout[pi].row(i).array();
        } else {
          dx *= graph.layer(p).dropout_keep.value_or(1.0);
        }
      }
      dq[pi] += dx;
    }
  }

  const auto& store = graph.params();
  for (std::size_t s = 0; s < grads.tensors.size(); ++s) {
    if (!store.trainable[s]) grads.tensors[s].setZero();
    if (store.structure[s].size() != 0) grads.tensors[s].array() *= store.structure[s].array();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// optimizer

struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::vector<Eigen::MatrixXd> velocity;  ///< lazily sized to the parameter store
};

/// v <- momentum * v + g; theta <- theta - lr * v. Non-trainable tensors are left untouched.
inline void sgd_step(ParameterStore& params, const GradientSet& grads, OptimizerState& opt) {
  if (grads.tensors.size() != params.tensors.size()) throw ContractError("gradient set does not match parameters");
  if (opt.velocity.empty()) {
    for (const auto& t : params.tensors) opt.velocity.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
  }
  if (opt.velocity.size() != params.tensors.size()) throw ContractError("optimizer state does not match parameters");
  for (std::size_t s = 0; s < params.tensors.size(); ++s) {
    const auto& g = grads.tensors[s];
    auto& v = opt.velocity[s];
    auto& theta = params.tensors[s];
    if (g.rows() != theta.rows() || g.cols() != theta.cols() || v.rows() != theta.rows() || v.cols() != theta.cols())
      throw ContractError("gradient shape mismatch in slot " + std::to_string(s));
    if (!params.trainable[s]) continue;
    v = opt.momentum * v + g;
    theta -= opt.learning_rate * v;
  }
}

// ---------------------------------------------------------------------------
// evaluation and training loops

struct FeedForwardTraining {};
/// Sampled dropout masks on the graph's annotated layers.
struct DropoutTraining {
  double keep = 0.5;
};
/// PCFF on every hidden node; the output layer stays collapsed.
struct PcffTraining {
  double rate = 0.5;
};
using TrainingMode = std::variant<FeedForwardTraining, DropoutTraining, PcffTraining>;

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double val_fraction = 0.2;
  int patience = 10;
  std::uint64_t seed = 0;
  TrainingMode mode = FeedForwardTraining{};
  LossSpec loss{};
  double learning_rate = 0.01;
  double momentum = 0.9;
};

struct EvalResult {
  double mean_loss = 0.0;
  double error_rate = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_err = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  ///< epoch whose parameters were kept (0 = initialization)
};

namespace detail {

inline Eigen::MatrixXd batch_inputs(const Dataset& data, std::span<const std::size_t> idx) {
  Eigen::MatrixXd x(data.examples[idx[0]].input.size(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t b = 0; b < idx.size(); ++b) x.col(static_cast<Eigen::Index>(b)) = data.examples[idx[b]].input;
  return x;
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

}  // namespace detail

/// Deterministic evaluation with dropout marginalized (test mode).
inline EvalResult evaluate(const LayeredChainGraph& graph, const Dataset& data, const LossSpec& loss,
                           int batch_size = 256) {
  if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
  check_loss(graph, loss);
  double total_loss = 0.0;
  long wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t k = start; k < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++k) idx.push_back(k);
    const ActivationState st = feed_forward(graph, detail::batch_inputs(data, idx), DropoutMode::Test);
    const Eigen::MatrixXd& q = st.output();
    const Eigen::MatrixXd& e = st.e.back();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto col = static_cast<Eigen::Index>(b);
      const int label = data.examples[idx[b]].label;
      total_loss += loss_eval(loss, q.col(col), e.col(col), label);
      if (detail::argmax(q.col(col)) != label) ++wrong;
    }
  }
  const auto n = static_cast<double>(data.size());
  return {total_loss / n, static_cast<double>(wrong) / n};
}

/// One forward pass of a training batch under the configured mode.
inline ForwardResult training_forward(const LayeredChainGraph& graph, const Eigen::MatrixXd& x, const TrainConfig& cfg,
                                      std::uint64_t first_pass) {
  PassSettings s;
  s.seed = cfg.seed;
  s.first_pass = first_pass;
  std::visit(Overloaded{
                 [](const FeedForwardTraining&) {},
                 [&s](const DropoutTraining&) { s.dropout = DropoutMode::Train; },
                 [&s](const PcffTraining& p) {
                   s.sample_rate = p.rate;
                   s.collapse_output = true;
                 },
             },
             cfg.mode);
  return run_forward(graph, x, s);
}

/// Mini-batch SGD with momentum. Shuffling, masks and noise all derive from
/// cfg.seed. With a validation split, training stops after `patience` epochs
/// without a new best validation loss and the best parameters are restored.
inline TrainResult train(LayeredChainGraph& graph, const Dataset& data, const TrainConfig& cfg) {
  if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0)) throw DomainError("validation fraction must lie in [0, 1)");
  if (cfg.patience < 1) throw DomainError("patience must be at least 1");
  if (cfg.batch_size < 1) throw DomainError("batch size must be at least 1");
  if (cfg.epochs < 0) throw DomainError("epoch count must be non-negative");
  check_loss(graph, cfg.loss);
  if (std::holds_alternative<DropoutTraining>(cfg.mode) && dropout_marked_connections(graph.spec()).empty())
    throw ContractError("dropout training needs a graph with dropout annotations");
  if (const auto* p = std::get_if<PcffTraining>(&cfg.mode); p && !(p->rate >= 0.0 && p->rate <= 1.0))
    throw DomainError("PCFF sample rate must lie in [0, 1]");

  const auto [train_set, val_set] = split(data, cfg.val_fraction, cfg.seed);
  if (train_set.empty()) throw ContractError("empty training split");

  OptimizerState opt{cfg.learning_rate, cfg.momentum, {}};
  TrainResult result;
  std::vector<Eigen::MatrixXd> best_params = graph.params().tensors;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  std::vector<int> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch), 0, StreamTag::Shuffle);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      labels.clear();
      for (auto k : idx) labels.push_back(train_set.examples[k].label);
      const std::uint64_t first_pass = static_cast<std::uint64_t>(epoch) * order.size() + start;
      const ForwardResult fwd = training_forward(graph, detail::batch_inputs(train_set, idx), cfg, first_pass);
      const OutputGradient up = loss_gradient(cfg.loss, fwd.state, labels, 1.0 / static_cast<double>(idx.size()));
      sgd_step(graph.params(), backward(graph, fwd.state, fwd.mask, up), opt);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const EvalResult tr = evaluate(graph, train_set, cfg.loss);
    rec.train_loss = tr.mean_loss;
    rec.train_err = tr.error_rate;
    if (!val_set.empty()) {
      const EvalResult va = evaluate(graph, val_set, cfg.loss);
      rec.val_loss = va.mean_loss;
      rec.val_err = va.error_rate;
    }
    result.history.push_back(rec);

    if (val_set.empty()) {
      result.best_epoch = epoch;
      continue;
    }
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best_params = graph.params().tensors;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (!val_set.empty() && result.best_epoch > 0) graph.params().tensors = best_params;
  return result;
}

}  // namespace lcg
