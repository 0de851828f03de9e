#pragma once

// JSON documents for graph descriptions (with builder directives) and for
// trained models (graph + parameter tensors).

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcg/distributions.hpp"
#include "lcg/error.hpp"
#include "lcg/graph.hpp"

namespace lcg {

using json = nlohmann::json;

inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kModelFormatName = "lcg-model";

/// Invalid configuration; the message names the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ConfigError(path + "." + key + ": missing field");
  return *it;
}

template <class T>
T get_as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <class T>
T required(const json& j, const std::string& key, const std::string& path) {
  return get_as<T>(field(j, key, path), path + "." + key);
}

template <class T>
T optional_or(const json& j, const std::string& key, T fallback, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return get_as<T>(*it, path + "." + key);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// distributions

inline json to_json(const NodeDistribution& dist) {
  return std::visit(Overloaded{
                        [](const Binary& b) { return json{{"type", "binary"}, {"alpha", b.alpha}, {"beta", b.beta}}; },
                        [](const Multilabel& m) { return json{{"type", "multilabel"}, {"classes", m.classes}}; },
                        [](const RectifiedGaussian& r) {
                          json std_json = std::holds_alternative<ConstantStd>(r.std_policy)
                                              ? json{{"type", "constant"}, {"s", std::get<ConstantStd>(r.std_policy).s}}
                                              : json{{"type", "tanh"}};
                          return json{{"type", "rectified_gaussian"}, {"leak", r.leak}, {"std", std_json}};
                        },
                    },
                    dist);
}

/// Accepts the explicit families plus the shorthands sigmoid, tanh,
/// softmax, relu, leaky_relu, softplus and identity.
inline NodeDistribution distribution_from_json(const json& j, const std::string& path) {
  const auto type = detail::required<std::string>(j, "type", path);
  if (type == "binary")
    return Binary{detail::required<double>(j, "alpha", path), detail::required<double>(j, "beta", path)};
  if (type == "sigmoid") return Binary{0.0, 1.0};
  if (type == "tanh") return Binary{-1.0, 1.0};
  if (type == "multilabel" || type == "softmax") return Multilabel{detail::required<int>(j, "classes", path)};
  if (type == "relu") return RectifiedGaussian{0.0, TanhModulatedStd{}};
  if (type == "leaky_relu") return RectifiedGaussian{detail::optional_or<double>(j, "leak", 1.0 / 3.0, path), TanhModulatedStd{}};
  if (type == "softplus") return RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}};
  if (type == "identity") return RectifiedGaussian{1.0, ConstantStd{1.0}};
  if (type == "rectified_gaussian") {
    RectifiedGaussian r;
    r.leak = detail::optional_or<double>(j, "leak", 0.0, path);
    const json& s = detail::field(j, "std", path);
    const auto kind = detail::required<std::string>(s, "type", path + ".std");
    if (kind == "constant")
      r.std_policy = ConstantStd{detail::required<double>(s, "s", path + ".std")};
    else if (kind == "tanh")
      r.std_policy = TanhModulatedStd{};
    else
      throw ConfigError(path + ".std.type: unknown std policy '" + kind + "'");
    return r;
  }
  throw ConfigError(path + ".type: unknown distribution '" + type + "'");
}

// ---------------------------------------------------------------------------
// graph specs

inline json to_json(const GraphSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json j{{"id", l.id}, {"size", l.size}, {"dist", to_json(l.dist)}, {"input", l.is_input}};
    if (l.bias_tie) j["bias_tie"] = *l.bias_tie;
    if (l.dropout_keep) j["dropout_keep"] = *l.dropout_keep;
    layers.push_back(std::move(j));
  }
  json conns = json::array();
  for (const auto& c : spec.connections) {
    json j{{"parent", c.parent}, {"child", c.child}};
    j["pattern"] = c.pattern == Pattern::Dense ? "dense" : c.pattern == Pattern::Diagonal ? "diagonal" : "masked";
    if (c.pattern == Pattern::Masked) {
      json rows = json::array();
      for (Eigen::Index r = 0; r < c.mask.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index k = 0; k < c.mask.cols(); ++k) row.push_back(c.mask(r, k) ? 1 : 0);
        rows.push_back(std::move(row));
      }
      j["mask"] = std::move(rows);
    }
    if (c.tie_group) j["tie_group"] = *c.tie_group;
    if (!c.trainable) j["trainable"] = false;
    if (c.init_std) j["init_std"] = *c.init_std;
    conns.push_back(std::move(j));
  }
  return json{{"layers", std::move(layers)}, {"connections", std::move(conns)}};
}

inline GraphSpec graph_spec_from_json(const json& j, const std::string& path) {
  GraphSpec spec;
  const json& layers = detail::field(j, "layers", path);
  if (!layers.is_array()) throw ConfigError(path + ".layers: expected an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string lp = path + ".layers[" + std::to_string(i) + "]";
    const json& lj = layers[i];
    LayerSpec l;
    l.id = detail::required<std::string>(lj, "id", lp);
    l.size = detail::required<int>(lj, "size", lp);
    l.dist = distribution_from_json(detail::field(lj, "dist", lp), lp + ".dist");
    l.is_input = detail::optional_or<bool>(lj, "input", false, lp);
    if (lj.contains("bias_tie")) l.bias_tie = detail::required<std::string>(lj, "bias_tie", lp);
    if (lj.contains("dropout_keep")) l.dropout_keep = detail::required<double>(lj, "dropout_keep", lp);
    spec.layers.push_back(std::move(l));
  }
  const json& conns = detail::field(j, "connections", path);
  if (!conns.is_array()) throw ConfigError(path + ".connections: expected an array");
  for (std::size_t k = 0; k < conns.size(); ++k) {
    const std::string cp = path + ".connections[" + std::to_string(k) + "]";
    const json& cj = conns[k];
    ConnectionSpec c;
    c.parent = detail::required<std::string>(cj, "parent", cp);
    c.child = detail::required<std::string>(cj, "child", cp);
    const auto pattern = detail::optional_or<std::string>(cj, "pattern", "dense", cp);
    if (pattern == "dense")
      c.pattern = Pattern::Dense;
    else if (pattern == "diagonal")
      c.pattern = Pattern::Diagonal;
    else if (pattern == "masked")
      c.pattern = Pattern::Masked;
    else
      throw ConfigError(cp + ".pattern: unknown pattern '" + pattern + "'");
    if (c.pattern == Pattern::Masked) {
      const auto rows = detail::required<std::vector<std::vector<int>>>(cj, "mask", cp);
      const std::size_t cols = rows.empty() ? 0 : rows[0].size();
      c.mask.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != cols) throw ConfigError(cp + ".mask: ragged rows");
        for (std::size_t q = 0; q < cols; ++q)
          c.mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) = rows[r][q] != 0;
      }
    }
    if (cj.contains("tie_group")) c.tie_group = detail::required<std::string>(cj, "tie_group", cp);
    c.trainable = detail::optional_or<bool>(cj, "trainable", true, cp);
    if (cj.contains("init_std")) c.init_std = detail::required<double>(cj, "init_std", cp);
    spec.connections.push_back(std::move(c));
  }
  return spec;
}

/// Graph description: either explicit layers/connections or a refinement
/// module {"refinement": {"base": desc, "refining": desc}} (each desc naming
/// "input" and "output"), optionally followed by recurrent unrolling and
/// dropout annotation directives.
inline GraphSpec graph_from_description(const json& j, const std::string& path = "graph");

namespace detail {

inline Fragment fragment_from_description(const json& j, const std::string& path) {
  Fragment f;
  f.spec = graph_from_description(j, path);
  f.input = optional_or<std::string>(j, "input", f.spec.layers.empty() ? "" : f.spec.layers.front().id, path);
  f.output = optional_or<std::string>(j, "output", f.spec.layers.empty() ? "" : f.spec.layers.back().id, path);
  return f;
}

}  // namespace detail

inline GraphSpec graph_from_description(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  GraphSpec spec;
  try {
    if (j.contains("refinement")) {
      const json& r = j.at("refinement");
      const Fragment base = detail::fragment_from_description(detail::field(r, "base", path + ".refinement"),
                                                              path + ".refinement.base");
      const Fragment refining = detail::fragment_from_description(detail::field(r, "refining", path + ".refinement"),
                                                                  path + ".refinement.refining");
      spec = build_refinement(base, refining).spec;
    } else {
      spec = graph_spec_from_json(j, path);
    }
    if (j.contains("recurrent")) {
      const json& r = j.at("recurrent");
      const std::string rp = path + ".recurrent";
      const auto mode = detail::required<std::string>(r, "mode", rp);
      if (mode != "simple_rnn" && mode != "indrnn") throw ConfigError(rp + ".mode: expected simple_rnn or indrnn");
      spec = build_recurrent_unrolled(spec, detail::required<std::vector<std::string>>(r, "layers", rp),
                                      detail::required<int>(r, "steps", rp),
                                      mode == "indrnn" ? RecurrentMode::IndRNN : RecurrentMode::SimpleRNN);
    }
    if (j.contains("dropout")) {
      const json& d = j.at("dropout");
      const std::string dp = path + ".dropout";
      std::vector<std::string> layers = d.contains("layers") ? detail::required<std::vector<std::string>>(d, "layers", dp)
                                                             : hidden_layers(spec);
      spec = augment_dropout(spec, layers, detail::required<double>(d, "keep", dp));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (auto errors = validate(spec); !errors.empty()) throw ConfigError(path + ": " + errors.front());
  return spec;
}

// ---------------------------------------------------------------------------
// models

inline json model_to_json(const LayeredChainGraph& graph) {
  json tensors = json::array();
  for (const auto& t : graph.params().tensors) {
    std::vector<double> data(t.data(), t.data() + t.size());  // column-major
    tensors.push_back(json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::move(data)}});
  }
  return json{{"format", kModelFormatName},
              {"version", kModelFormatVersion},
              {"graph", to_json(graph.spec())},
              {"tensors", std::move(tensors)}};
}

inline LayeredChainGraph model_from_json(const json& j) {
  const auto format = detail::required<std::string>(j, "format", "model");
  if (format != kModelFormatName) throw ConfigError("model.format: expected '" + std::string(kModelFormatName) + "'");
  const auto version = detail::required<int>(j, "version", "model");
  if (version != kModelFormatVersion)
    throw ConfigError("model.version: unsupported version " + std::to_string(version) + ", expected " +
                      std::to_string(kModelFormatVersion));
  GraphSpec spec = graph_spec_from_json(detail::field(j, "graph", "model"), "model.graph");
  if (auto errors = validate(spec); !errors.empty()) throw ConfigError("model.graph: " + errors.front());
  LayeredChainGraph graph(std::move(spec));
  const json& tensors = detail::field(j, "tensors", "model");
  auto& store = graph.params().tensors;
  if (!tensors.is_array() || tensors.size() != store.size())
    throw ConfigError("model.tensors: expected " + std::to_string(store.size()) + " tensors");
  for (std::size_t s = 0; s < store.size(); ++s) {
    const std::string tp = "model.tensors[" + std::to_string(s) + "]";
    const auto rows = detail::required<Eigen::Index>(tensors[s], "rows", tp);
    const auto cols = detail::required<Eigen::Index>(tensors[s], "cols", tp);
    const auto data = detail::required<std::vector<double>>(tensors[s], "data", tp);
    if (rows != store[s].rows() || cols != store[s].cols() || static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw ConfigError(tp + ": shape does not match the graph");
    store[s] = Eigen::Map<const Eigen::MatrixXd>(data.data(), rows, cols);
  }
  graph.params().enforce_structure();
  return graph;
}

/// Parses a JSON file; syntax errors report the byte position.
inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return json::parse(buffer.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

}  // namespace lcg
