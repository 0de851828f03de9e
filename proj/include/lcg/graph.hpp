#pragma once

// Layered chain graph data model: layers of typed random-variable nodes in
// topological order, pairwise connections between layers, and the parameter
// store holding unary (bias) and pairwise (weight) terms.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcg/distributions.hpp"
#include "lcg/error.hpp"
#include "lcg/rng.hpp"

namespace lcg {

enum class Pattern { Dense, Diagonal, Masked };

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct LayerSpec {
  std::string id;
  int size = 1;
  NodeDistribution dist = Binary{};
  bool is_input = false;
  /// Layers in the same bias tie group share one bias vector.
  std::optional<std::string> bias_tie;
  /// Keep probability of the auxiliary Bernoulli nodes gating this layer's
  /// outgoing pairwise terms. Absent means no dropout.
  std::optional<double> dropout_keep;
};

struct ConnectionSpec {
  std::string parent;
  std::string child;
  Pattern pattern = Pattern::Dense;
  /// Node-pair mask of shape N^parent x N^child, used when pattern == Masked.
  BoolMatrix mask;
  std::optional<std::string> tie_group;
  bool trainable = true;
  /// Overrides the 1/sqrt(fan-in) standard deviation of the default initializer.
  std::optional<double> init_std;
};

struct GraphSpec {
  std::vector<LayerSpec> layers;
  std::vector<ConnectionSpec> connections;
};

/// A graph spec with a designated input and output layer, used by the builders.
struct Fragment {
  GraphSpec spec;
  std::string input;
  std::string output;
};

// ---------------------------------------------------------------------------
// validation

namespace detail {

inline std::optional<std::size_t> find_layer(const GraphSpec& spec, const std::string& id) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].id == id) return i;
  return std::nullopt;
}

struct TensorShape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool operator==(const TensorShape&) const = default;
};

inline TensorShape weight_shape(const LayerSpec& parent, const LayerSpec& child, Pattern pattern) {
  const int dp = feature_dim(parent.dist);
  const int dc = feature_dim(child.dist);
  if (pattern == Pattern::Diagonal) return {dc, static_cast<Eigen::Index>(parent.size) * dp};
  return {static_cast<Eigen::Index>(child.size) * dc, static_cast<Eigen::Index>(parent.size) * dp};
}

}  // namespace detail

/// Checks every structural invariant. An empty result means the spec is valid.
inline std::vector<std::string> validate(const GraphSpec& spec) {
  std::vector<std::string> out;
  std::map<std::string, std::size_t> index;
  bool any_input = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (layer.id.empty()) out.push_back("layer " + std::to_string(i) + ": empty id");
    if (!index.emplace(layer.id, i).second) out.push_back("layer '" + layer.id + "': duplicate id");
    if (layer.size < 1) out.push_back("layer '" + layer.id + "': size must be >= 1");
    if (auto bad = check_distribution(layer.dist)) out.push_back("layer '" + layer.id + "': " + *bad);
    if (layer.dropout_keep && !(*layer.dropout_keep > 0.0 && *layer.dropout_keep <= 1.0))
      out.push_back("layer '" + layer.id + "': dropout keep probability must lie in (0, 1]");
    any_input = any_input || layer.is_input;
  }
  if (spec.layers.empty()) {
    out.emplace_back("graph has no layers");
    return out;
  }
  if (!any_input) out.emplace_back("graph has no input layer");
  if (spec.layers.back().dropout_keep) out.push_back("layer '" + spec.layers.back().id + "': output layer cannot carry dropout");

  std::vector<int> parent_count(spec.layers.size(), 0);
  std::map<std::string, std::pair<detail::TensorShape, std::pair<Pattern, bool>>> ties;
  for (std::size_t k = 0; k < spec.connections.size(); ++k) {
    const auto& c = spec.connections[k];
    const std::string name = "connection " + std::to_string(k) + " (" + c.parent + " -> " + c.child + ")";
    const auto p = index.find(c.parent);
    const auto q = index.find(c.child);
    if (p == index.end() || q == index.end()) {
      out.push_back(name + ": unknown layer");
      continue;
    }
    const auto& parent = spec.layers[p->second];
    const auto& child = spec.layers[q->second];
    if (p->second >= q->second) out.push_back(name + ": cycle violation, parent must precede child in topological order");
    if (child.is_input) out.push_back(name + ": input layer cannot have parents");
    ++parent_count[q->second];
    if (c.pattern == Pattern::Diagonal && parent.size != child.size)
      out.push_back(name + ": shape violation, diagonal pattern needs equal layer sizes (" +
                    std::to_string(parent.size) + " vs " + std::to_string(child.size) + ")");
    if (c.pattern == Pattern::Masked && (c.mask.rows() != parent.size || c.mask.cols() != child.size))
      out.push_back(name + ": shape violation, mask must be " + std::to_string(parent.size) + "x" +
                    std::to_string(child.size));
    if (c.init_std && !(*c.init_std >= 0.0)) out.push_back(name + ": init_std must be non-negative");
    if (c.tie_group) {
      const auto shape = detail::weight_shape(parent, child, c.pattern);
      auto [it, fresh] = ties.emplace(*c.tie_group, std::make_pair(shape, std::make_pair(c.pattern, c.trainable)));
      if (!fresh && (it->second.first != shape || it->second.second.first != c.pattern))
        out.push_back(name + ": tie group '" + *c.tie_group + "' mixes shapes or patterns");
      if (!fresh && it->second.second.second != c.trainable)
        out.push_back(name + ": tie group '" + *c.tie_group + "' mixes trainable flags");
    }
  }
  std::map<std::string, Eigen::Index> bias_ties;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (!layer.is_input && parent_count[i] == 0) out.push_back("layer '" + layer.id + "': non-input layer has no parents");
    if (layer.bias_tie && !layer.is_input) {
      const Eigen::Index rows = static_cast<Eigen::Index>(layer.size) * feature_dim(layer.dist);
      auto [it, fresh] = bias_ties.emplace(*layer.bias_tie, rows);
      if (!fresh && it->second != rows) out.push_back("layer '" + layer.id + "': bias tie group '" + *layer.bias_tie + "' mixes shapes");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// parameters

/// Flat list of parameter tensors; tied connections and layers point at the
/// same slot, so they share storage.
struct ParameterStore {
  std::vector<Eigen::MatrixXd> tensors;
  std::vector<bool> trainable;
  /// 0/1 structural masks for Masked connections (empty matrix otherwise).
  std::vector<Eigen::MatrixXd> structure;
  std::vector<int> weight_slot;  ///< per connection
  std::vector<int> bias_slot;    ///< per layer, -1 for input layers

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  /// Zeroes masked-out pairwise entries.
  void enforce_structure() {
    for (std::size_t s = 0; s < tensors.size(); ++s)
      if (structure[s].size() != 0) tensors[s].array() *= structure[s].array();
  }
};

class LayeredChainGraph {
 public:
  explicit LayeredChainGraph(GraphSpec spec) : spec_(std::move(spec)) {
    if (auto errors = validate(spec_); !errors.empty()) {
      std::string msg = "invalid graph:";
      for (const auto& e : errors) msg += "\n  " + e;
      throw ContractError(msg);
    }
    const std::size_t n = spec_.layers.size();
    parents_.resize(n);
    children_.resize(n);
    rows_.resize(n);
    node_offset_.resize(n);
    std::int64_t nodes = 0;
    for (std::size_t l = 0; l < n; ++l) {
      index_[spec_.layers[l].id] = static_cast<int>(l);
      rows_[l] = static_cast<Eigen::Index>(spec_.layers[l].size) * feature_dim(spec_.layers[l].dist);
      node_offset_[l] = nodes;
      nodes += spec_.layers[l].size;
      if (spec_.layers[l].is_input) inputs_.push_back(static_cast<int>(l));
    }
    node_count_ = nodes;
    for (std::size_t k = 0; k < spec_.connections.size(); ++k) {
      parents_[index_.at(spec_.connections[k].child)].push_back(static_cast<int>(k));
      children_[index_.at(spec_.connections[k].parent)].push_back(static_cast<int>(k));
    }
    allocate();
  }

  const GraphSpec& spec() const { return spec_; }
  std::size_t layer_count() const { return spec_.layers.size(); }
  const LayerSpec& layer(int l) const { return spec_.layers.at(static_cast<std::size_t>(l)); }
  const ConnectionSpec& connection(int k) const { return spec_.connections.at(static_cast<std::size_t>(k)); }
  std::size_t connection_count() const { return spec_.connections.size(); }

  int layer_index(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("unknown layer '" + id + "'");
    return it->second;
  }
  int parent_layer(int k) const { return index_.at(connection(k).parent); }
  int child_layer(int k) const { return index_.at(connection(k).child); }

  /// Incoming / outgoing connection indices of layer l.
  std::span<const int> parents(int l) const { return parents_[static_cast<std::size_t>(l)]; }
  std::span<const int> children(int l) const { return children_[static_cast<std::size_t>(l)]; }

  std::span<const int> input_layers() const { return inputs_; }
  int output_layer() const { return static_cast<int>(spec_.layers.size()) - 1; }

  /// Rows of the layer state: N^l * d^l.
  Eigen::Index rows(int l) const { return rows_[static_cast<std::size_t>(l)]; }
  int dim(int l) const { return feature_dim(layer(l).dist); }
  /// Length of the concatenated input vector (input layers in order).
  Eigen::Index input_rows() const {
    Eigen::Index r = 0;
    for (int l : inputs_) r += rows(l);
    return r;
  }

  /// Global index of node 0 of layer l (used to derive per-node streams).
  std::int64_t node_offset(int l) const { return node_offset_[static_cast<std::size_t>(l)]; }
  std::int64_t node_count() const { return node_count_; }

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Eigen::MatrixXd& weight(int k) { return params_.tensors[static_cast<std::size_t>(params_.weight_slot[static_cast<std::size_t>(k)])]; }
  const Eigen::MatrixXd& weight(int k) const {
    return params_.tensors[static_cast<std::size_t>(params_.weight_slot[static_cast<std::size_t>(k)])];
  }
  /// Bias column vector of a non-input layer.
  Eigen::MatrixXd& bias(int l) { return params_.tensors[static_cast<std::size_t>(bias_slot_checked(l))]; }
  const Eigen::MatrixXd& bias(int l) const { return params_.tensors[static_cast<std::size_t>(bias_slot_checked(l))]; }

 private:
  int bias_slot_checked(int l) const {
    const int s = params_.bias_slot.at(static_cast<std::size_t>(l));
    if (s < 0) throw ContractError("input layer '" + layer(l).id + "' has no bias");
    return s;
  }

  void allocate() {
    std::map<std::string, int> weight_groups;
    std::map<std::string, int> bias_groups;
    auto new_slot = [this](Eigen::Index r, Eigen::Index c, bool trainable) {
      params_.tensors.emplace_back(Eigen::MatrixXd::Zero(r, c));
      params_.trainable.push_back(trainable);
      params_.structure.emplace_back();
      return static_cast<int>(params_.tensors.size()) - 1;
    };
    for (std::size_t k = 0; k < spec_.connections.size(); ++k) {
      const auto& c = spec_.connections[k];
      const auto& parent = spec_.layers[static_cast<std::size_t>(index_.at(c.parent))];
      const auto& child = spec_.layers[static_cast<std::size_t>(index_.at(c.child))];
      const auto shape = detail::weight_shape(parent, child, c.pattern);
      int slot = -1;
      if (c.tie_group) {
        if (auto it = weight_groups.find(*c.tie_group); it != weight_groups.end()) slot = it->second;
      }
      if (slot < 0) {
        slot = new_slot(shape.rows, shape.cols, c.trainable);
        if (c.tie_group) weight_groups[*c.tie_group] = slot;
        if (c.pattern == Pattern::Masked) {
          const int dp = feature_dim(parent.dist);
          const int dc = feature_dim(child.dist);
          Eigen::MatrixXd s = Eigen::MatrixXd::Zero(shape.rows, shape.cols);
          for (int j = 0; j < parent.size; ++j)
            for (int i = 0; i < child.size; ++i)
              if (c.mask(j, i)) s.block(i * dc, j * dp, dc, dp).setOnes();
          params_.structure.back() = std::move(s);
        }
      }
      params_.weight_slot.push_back(slot);
    }
    for (const auto& layer : spec_.layers) {
      if (layer.is_input) {
        params_.bias_slot.push_back(-1);
        continue;
      }
      const Eigen::Index r = static_cast<Eigen::Index>(layer.size) * feature_dim(layer.dist);
      int slot = -1;
      if (layer.bias_tie) {
        if (auto it = bias_groups.find(*layer.bias_tie); it != bias_groups.end()) slot = it->second;
      }
      if (slot < 0) {
        slot = new_slot(r, 1, true);
        if (layer.bias_tie) bias_groups[*layer.bias_tie] = slot;
      }
      params_.bias_slot.push_back(slot);
    }
  }

  GraphSpec spec_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::vector<int>> parents_;
  std::vector<std::vector<int>> children_;
  std::vector<Eigen::Index> rows_;
  std::vector<std::int64_t> node_offset_;
  std::int64_t node_count_ = 0;
  std::vector<int> inputs_;
  ParameterStore params_;
};

// ---------------------------------------------------------------------------
// preactivation

/// Adds W * q_parent for connection k to the child preactivation e.
inline void accumulate_connection(const LayeredChainGraph& graph, int k, const Eigen::MatrixXd& parent_q,
                                  Eigen::MatrixXd& e) {
  const auto& w = graph.weight(k);
  if (graph.connection(k).pattern == Pattern::Masked) {
    const auto slot = static_cast<std::size_t>(graph.params().weight_slot[static_cast<std::size_t>(k)]);
    e.noalias() += w.cwiseProduct(graph.params().structure[slot]) * parent_q;
    return;
  }
  if (graph.connection(k).pattern == Pattern::Dense) {
    e.noalias() += w * parent_q;
    return;
  }
  const int dc = static_cast<int>(w.rows());
  const int dp = graph.dim(graph.parent_layer(k));
  const int n = graph.layer(graph.parent_layer(k)).size;
  if (dc == 1 && dp == 1) {
    e.array() += parent_q.array().colwise() * w.row(0).transpose().array();
    return;
  }
  for (int i = 0; i < n; ++i)
    e.middleRows(i * dc, dc).noalias() += w.middleCols(i * dp, dp) * parent_q.middleRows(i * dp, dp);
}

/// Preactivation of layer l where parent_of(p) returns the (gated) state of parent layer p.
template <class ParentState>
Eigen::MatrixXd preactivation_with(const LayeredChainGraph& graph, int l, ParentState&& parent_of) {
  if (graph.layer(l).is_input) throw ContractError("input layer has no preactivation");
  Eigen::Index batch = -1;
  for (int k : graph.parents(l)) {
    const int p = graph.parent_layer(k);
    const Eigen::MatrixXd* q = parent_of(p);
    if (q == nullptr || q->rows() != graph.rows(p))
      throw ContractError("missing or mis-sized parent '" + graph.layer(p).id + "' of layer '" + graph.layer(l).id + "'");
    if (batch >= 0 && q->cols() != batch) throw ContractError("parent batch sizes differ");
    batch = q->cols();
  }
  Eigen::MatrixXd e = graph.bias(l).replicate(1, batch);
  for (int k : graph.parents(l)) accumulate_connection(graph, k, *parent_of(graph.parent_layer(k)), e);
  return e;
}

/// Batched preactivation of layer l. parent_q holds one state matrix per
/// layer (rows(l) x batch); only parents of l are read.
inline Eigen::MatrixXd preactivation(const LayeredChainGraph& graph, int l, std::span<const Eigen::MatrixXd> parent_q) {
  return preactivation_with(graph, l, [&](int p) -> const Eigen::MatrixXd* {
    const auto i = static_cast<std::size_t>(p);
    return i < parent_q.size() && parent_q[i].size() != 0 ? &parent_q[i] : nullptr;
  });
}

/// Single-sample preactivation from a map of parent layer id to expected features.
inline Eigen::VectorXd preactivation(const LayeredChainGraph& graph, const std::string& layer_id,
                                     const std::map<std::string, Eigen::VectorXd>& parents) {
  const int l = graph.layer_index(layer_id);
  std::vector<Eigen::MatrixXd> q(graph.layer_count());
  for (int k : graph.parents(l)) {
    const int p = graph.parent_layer(k);
    const auto it = parents.find(graph.layer(p).id);
    if (it == parents.end()) throw ContractError("missing parent '" + graph.layer(p).id + "'");
    q[static_cast<std::size_t>(p)] = it->second;
  }
  return preactivation(graph, l, q);
}

// ---------------------------------------------------------------------------
// initialization

enum class InitScheme { Gaussian, Zeros };

/// Biases zero; weights i.i.d. N(0, 1/fan_in) (or the connection's init_std),
/// one draw per tie group, deterministic in seed.
inline void init_params(LayeredChainGraph& graph, InitScheme scheme, std::uint64_t seed) {
  auto& store = graph.params();
  for (auto& t : store.tensors) t.setZero();
  if (scheme == InitScheme::Zeros) return;
  std::vector<bool> done(store.tensors.size(), false);
  for (int k = 0; k < static_cast<int>(graph.connection_count()); ++k) {
    const auto slot = static_cast<std::size_t>(store.weight_slot[static_cast<std::size_t>(k)]);
    if (done[slot]) continue;
    done[slot] = true;
    const auto& c = graph.connection(k);
    const Eigen::Index fan_in = c.pattern == Pattern::Diagonal ? graph.dim(graph.parent_layer(k)) : store.tensors[slot].cols();
    const double std = c.init_std.value_or(1.0 / std::sqrt(static_cast<double>(fan_in)));
    Rng rng = Rng::stream(seed, slot, 0, StreamTag::Init);
    std::normal_distribution<double> normal(0.0, std);
    auto& t = store.tensors[slot];
    for (Eigen::Index j = 0; j < t.cols(); ++j)
      for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, j) = normal(rng);
  }
  store.enforce_structure();
}

// ---------------------------------------------------------------------------
// builders

namespace detail {

inline std::string fresh_id(const std::string& wanted, const std::set<std::string>& taken) {
  if (!taken.contains(wanted)) return wanted;
  for (int k = 2;; ++k) {
    std::string candidate = wanted + "#" + std::to_string(k);
    if (!taken.contains(candidate)) return candidate;
  }
}

inline std::set<std::string> tie_names(const GraphSpec& spec) {
  std::set<std::string> names;
  for (const auto& c : spec.connections)
    if (c.tie_group) names.insert(*c.tie_group);
  for (const auto& l : spec.layers)
    if (l.bias_tie) names.insert(*l.bias_tie);
  return names;
}

/// Gives every connection and non-input layer a tie group so copies can share storage.
inline void name_all_ties(GraphSpec& spec, const std::string& prefix) {
  auto taken = tie_names(spec);
  for (std::size_t k = 0; k < spec.connections.size(); ++k) {
    auto& c = spec.connections[k];
    if (!c.tie_group) {
      c.tie_group = fresh_id(prefix + "w:" + c.parent + "->" + c.child, taken);
      taken.insert(*c.tie_group);
    }
  }
  for (auto& l : spec.layers) {
    if (!l.is_input && !l.bias_tie) {
      l.bias_tie = fresh_id(prefix + "b:" + l.id, taken);
      taken.insert(*l.bias_tie);
    }
  }
}

inline bool same_node_type(const LayerSpec& a, const LayerSpec& b) { return a.size == b.size && a.dist == b.dist; }

}  // namespace detail

/// Refinement module: the base submodule into X^l, a weight-tied copy of the
/// base into a duplicate layer X~^l, and the refining submodule from X~^l
/// into X^l. Feed-forward through the result computes
/// q^l = g(e_base(q) + e_refine(g(e_base(q)))), a preactivation residual block.
inline Fragment build_refinement(const Fragment& base, const Fragment& refining) {
  const auto base_in = detail::find_layer(base.spec, base.input);
  const auto base_out = detail::find_layer(base.spec, base.output);
  const auto ref_in = detail::find_layer(refining.spec, refining.input);
  const auto ref_out = detail::find_layer(refining.spec, refining.output);
  if (!base_in || !base_out || !ref_in || !ref_out) throw ContractError("fragment input/output layer not found");
  const LayerSpec& out_layer = base.spec.layers[*base_out];
  if (!detail::same_node_type(out_layer, refining.spec.layers[*ref_out]))
    throw ContractError("refining output layer must match the base output layer in size and distribution");
  if (!detail::same_node_type(out_layer, refining.spec.layers[*ref_in]))
    throw ContractError("refining input layer must match the base output layer in size and distribution");
  if (*base_out != base.spec.layers.size() - 1) throw ContractError("base output must be the last base layer");
  if (*ref_out != refining.spec.layers.size() - 1) throw ContractError("refining output must be the last refining layer");

  GraphSpec tied = base.spec;
  detail::name_all_ties(tied, "");

  std::set<std::string> taken;
  for (const auto& l : tied.layers) taken.insert(l.id);
  std::map<std::string, std::string> copy_name;  // base layer -> duplicate
  copy_name[base.input] = base.input;
  for (const auto& l : tied.layers) {
    if (l.id == base.input) continue;
    copy_name[l.id] = detail::fresh_id(l.id + "~", taken);
    taken.insert(copy_name[l.id]);
  }
  const std::string dup_out = copy_name[base.output];

  std::map<std::string, std::string> ref_name;  // refining layer -> result layer
  ref_name[refining.input] = dup_out;
  ref_name[refining.output] = base.output;
  for (const auto& l : refining.spec.layers) {
    if (l.id == refining.input || l.id == refining.output) continue;
    ref_name[l.id] = detail::fresh_id(l.id, taken);
    taken.insert(ref_name[l.id]);
  }

  Fragment result;
  result.input = base.input;
  result.output = base.output;
  auto& layers = result.spec.layers;
  // base layers except the output, then the duplicate chain, then refining internals, then X^l
  for (const auto& l : tied.layers)
    if (l.id != base.output) layers.push_back(l);
  for (const auto& l : tied.layers) {
    if (l.id == base.input) continue;
    LayerSpec dup = l;
    dup.id = copy_name[l.id];
    layers.push_back(dup);
  }
  for (const auto& l : refining.spec.layers) {
    if (l.id == refining.input || l.id == refining.output) continue;
    LayerSpec inner = l;
    inner.id = ref_name[l.id];
    layers.push_back(inner);
  }
  layers.push_back(tied.layers[*base_out]);

  auto& conns = result.spec.connections;
  conns = tied.connections;
  for (const auto& c : tied.connections) {
    ConnectionSpec dup = c;
    dup.parent = copy_name[c.parent];
    dup.child = copy_name[c.child];
    conns.push_back(dup);
  }
  for (const auto& c : refining.spec.connections) {
    ConnectionSpec r = c;
    r.parent = ref_name.at(c.parent);
    r.child = ref_name.at(c.child);
    conns.push_back(r);
  }
  return result;
}

enum class RecurrentMode { SimpleRNN, IndRNN };

inline std::string step_id(const std::string& id, int t) { return id + "@" + std::to_string(t); }

/// Copies the base graph once per time step with all base parameters tied
/// across time, and links each recurrent layer to its previous-step copy:
/// dense U for SimpleRNN, node-diagonal U for IndRNN. Step t layers are
/// named "<id>@<t>" (t from 1); steps == 1 returns the base unchanged.
inline GraphSpec build_recurrent_unrolled(const GraphSpec& base, const std::vector<std::string>& recurrent, int steps,
                                          RecurrentMode mode) {
  if (steps < 1) throw DomainError("recurrent unrolling needs at least one step");
  for (const auto& id : recurrent) {
    const auto idx = detail::find_layer(base, id);
    if (!idx) throw ContractError("recurrent layer '" + id + "' not in base graph");
    if (base.layers[*idx].is_input) throw ContractError("input layer '" + id + "' cannot be recurrent");
  }
  if (steps == 1) return base;

  GraphSpec tied = base;
  detail::name_all_ties(tied, "");
  auto taken = detail::tie_names(tied);
  std::map<std::string, std::string> rec_group;
  for (const auto& id : recurrent) {
    rec_group[id] = detail::fresh_id("u:" + id, taken);
    taken.insert(rec_group[id]);
  }

  GraphSpec out;
  for (int t = 1; t <= steps; ++t) {
    for (const auto& l : tied.layers) {
      LayerSpec copy = l;
      copy.id = step_id(l.id, t);
      out.layers.push_back(copy);
    }
    for (const auto& c : tied.connections) {
      ConnectionSpec copy = c;
      copy.parent = step_id(c.parent, t);
      copy.child = step_id(c.child, t);
      out.connections.push_back(copy);
    }
    if (t == 1) continue;
    for (const auto& id : recurrent) {
      ConnectionSpec u;
      u.parent = step_id(id, t - 1);
      u.child = step_id(id, t);
      u.pattern = mode == RecurrentMode::IndRNN ? Pattern::Diagonal : Pattern::Dense;
      u.tie_group = rec_group[id];
      out.connections.push_back(u);
    }
  }
  return out;
}

/// Annotates layers with auxiliary Bernoulli(keep) nodes that gate every
/// pairwise term in which the layer's nodes are parents.
inline GraphSpec augment_dropout(GraphSpec spec, const std::vector<std::string>& layers, double keep) {
  if (!(keep > 0.0 && keep <= 1.0)) throw DomainError("dropout keep probability must lie in (0, 1]");
  for (const auto& id : layers) {
    const auto idx = detail::find_layer(spec, id);
    if (!idx) throw ContractError("dropout layer '" + id + "' not in graph");
    if (*idx + 1 == spec.layers.size()) throw ContractError("dropout cannot target the output layer '" + id + "'");
    spec.layers[*idx].dropout_keep = keep;
  }
  return spec;
}

/// Indices of connections whose parent layer carries a dropout annotation.
inline std::vector<int> dropout_marked_connections(const GraphSpec& spec) {
  std::vector<int> out;
  for (std::size_t k = 0; k < spec.connections.size(); ++k) {
    const auto p = detail::find_layer(spec, spec.connections[k].parent);
    if (p && spec.layers[*p].dropout_keep) out.push_back(static_cast<int>(k));
  }
  return out;
}

/// Hidden layers: neither input nor output.
inline std::vector<std::string> hidden_layers(const GraphSpec& spec) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i)
    if (!spec.layers[i].is_input) out.push_back(spec.layers[i].id);
  return out;
}

/// Copy of the graph whose connections out of dropout-annotated layers are
/// scaled by the keep probability and whose annotations are removed.
inline LayeredChainGraph scale_dropout_weights(const LayeredChainGraph& graph) {
  GraphSpec plain = graph.spec();
  for (auto& l : plain.layers) l.dropout_keep.reset();
  // untie so scaling one use of a shared tensor leaves the others intact
  for (auto& c : plain.connections) c.tie_group.reset();
  LayeredChainGraph out(plain);
  for (int k = 0; k < static_cast<int>(graph.connection_count()); ++k) {
    const auto keep = graph.layer(graph.parent_layer(k)).dropout_keep;
    out.weight(k) = graph.weight(k) * keep.value_or(1.0);
  }
  for (int l = 0; l < static_cast<int>(graph.layer_count()); ++l)
    if (!graph.layer(l).is_input) out.bias(l) = graph.bias(l);
  return out;
}

}  // namespace lcg
