#pragma once

// Experiment configuration (JSON) and the run loop shared by the command
// line tool: data loading, per-method graph variants, training and test
// evaluation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lcg/data.hpp"
#include "lcg/graph.hpp"
#include "lcg/serialize.hpp"
#include "lcg/training.hpp"

namespace lcg {

struct DataConfig {
  std::string kind = "blobs";  ///< idx | blobs | sequences
  // idx
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  long train_limit = -1;
  long test_limit = -1;
  int classes = 10;
  // blobs
  int per_class = 50;
  int test_per_class = 20;
  int dim = 2;
  double separation = 4.0;
  // sequences
  int length = 10;
  int train_count = 500;
  int test_count = 200;
  std::optional<std::uint64_t> seed;  ///< defaults to the experiment seed
};

struct MethodSettings {
  double dropout_keep = 0.5;
  std::vector<std::string> dropout_layers;  ///< empty = every hidden layer
  double pcff_rate = 0.5;
};

struct ExperimentConfig {
  GraphSpec graph;
  DataConfig data;
  TrainConfig train;
  InitScheme init = InitScheme::Gaussian;
  std::string method = "none";  ///< used by train
  MethodSettings methods;
  int runs = 1;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> names = {"none", "dropout", "pcff"};
  return names;
}

namespace detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline DataConfig parse_data(const json& j, const std::filesystem::path& base) {
  const std::string path = "data";
  DataConfig d;
  d.kind = required<std::string>(j, "kind", path);
  if (j.contains("seed")) d.seed = required<std::uint64_t>(j, "seed", path);
  if (d.kind == "idx") {
    d.train_images = resolve(base, required<std::string>(j, "train_images", path));
    d.train_labels = resolve(base, required<std::string>(j, "train_labels", path));
    d.test_images = resolve(base, required<std::string>(j, "test_images", path));
    d.test_labels = resolve(base, required<std::string>(j, "test_labels", path));
    d.train_limit = optional_or<long>(j, "train_limit", -1, path);
    d.test_limit = optional_or<long>(j, "test_limit", -1, path);
    d.classes = optional_or<int>(j, "classes", 10, path);
  } else if (d.kind == "blobs") {
    d.classes = optional_or<int>(j, "classes", 3, path);
    d.per_class = optional_or<int>(j, "per_class", 50, path);
    d.test_per_class = optional_or<int>(j, "test_per_class", 20, path);
    d.dim = optional_or<int>(j, "dim", 2, path);
    d.separation = optional_or<double>(j, "separation", 4.0, path);
  } else if (d.kind == "sequences") {
    d.length = optional_or<int>(j, "length", 10, path);
    d.train_count = optional_or<int>(j, "train", 500, path);
    d.test_count = optional_or<int>(j, "test", 200, path);
  } else {
    throw ConfigError("data.kind: unknown data source '" + d.kind + "' (expected idx, blobs or sequences)");
  }
  return d;
}

inline LossSpec parse_loss(const std::string& name, const std::string& path) {
  if (name == "cross_entropy") return {LossKind::CrossEntropy};
  if (name == "squared_error") return {LossKind::SquaredError};
  throw ConfigError(path + ": unknown loss '" + name + "' (expected cross_entropy or squared_error)");
}

}  // namespace detail

/// Parses an experiment document; relative data paths resolve against base_dir.
inline ExperimentConfig parse_experiment(const json& j, const std::filesystem::path& base_dir = ".") {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  ExperimentConfig cfg;
  cfg.seed = detail::optional_or<std::uint64_t>(j, "seed", 0, "config");
  cfg.runs = detail::optional_or<int>(j, "runs", 1, "config");
  if (cfg.runs < 1) throw ConfigError("config.runs: must be at least 1");
  cfg.out = detail::optional_or<std::string>(j, "out", "out", "config");
  cfg.graph = graph_from_description(detail::field(j, "graph", "config"), "graph");
  cfg.data = detail::parse_data(detail::field(j, "data", "config"), base_dir);

  const json empty = json::object();
  const json& t = j.contains("train") ? j.at("train") : empty;
  const std::string tp = "train";
  TrainConfig& tc = cfg.train;
  tc.epochs = detail::optional_or<int>(t, "epochs", tc.epochs, tp);
  tc.batch_size = detail::optional_or<int>(t, "batch_size", tc.batch_size, tp);
  tc.val_fraction = detail::optional_or<double>(t, "val_fraction", tc.val_fraction, tp);
  tc.patience = detail::optional_or<int>(t, "patience", tc.patience, tp);
  tc.learning_rate = detail::optional_or<double>(t, "learning_rate", tc.learning_rate, tp);
  tc.momentum = detail::optional_or<double>(t, "momentum", tc.momentum, tp);
  tc.loss = detail::parse_loss(detail::optional_or<std::string>(t, "loss", "cross_entropy", tp), tp + ".loss");
  if (tc.epochs < 0) throw ConfigError("train.epochs: must be non-negative");
  if (tc.batch_size < 1) throw ConfigError("train.batch_size: must be at least 1");
  if (tc.patience < 1) throw ConfigError("train.patience: must be at least 1");
  if (!(tc.val_fraction >= 0.0 && tc.val_fraction < 1.0)) throw ConfigError("train.val_fraction: must lie in [0, 1)");
  const auto init = detail::optional_or<std::string>(t, "init", "gaussian", tp);
  if (init != "gaussian" && init != "zeros") throw ConfigError("train.init: expected gaussian or zeros");
  cfg.init = init == "zeros" ? InitScheme::Zeros : InitScheme::Gaussian;
  cfg.method = detail::optional_or<std::string>(t, "method", "none", tp);
  if (std::find(known_methods().begin(), known_methods().end(), cfg.method) == known_methods().end())
    throw ConfigError("train.method: unknown method '" + cfg.method + "' (expected none, dropout or pcff)");

  if (j.contains("methods")) {
    const json& m = j.at("methods");
    if (!m.is_object()) throw ConfigError("methods: expected an object");
    if (m.contains("dropout")) {
      const json& d = m.at("dropout");
      cfg.methods.dropout_keep = detail::optional_or<double>(d, "keep", 0.5, "methods.dropout");
      cfg.methods.dropout_layers =
          detail::optional_or<std::vector<std::string>>(d, "layers", {}, "methods.dropout");
      if (!(cfg.methods.dropout_keep > 0.0 && cfg.methods.dropout_keep <= 1.0))
        throw ConfigError("methods.dropout.keep: must lie in (0, 1]");
    }
    if (m.contains("pcff")) {
      cfg.methods.pcff_rate = detail::optional_or<double>(m.at("pcff"), "rate", 0.5, "methods.pcff");
      if (!(cfg.methods.pcff_rate >= 0.0 && cfg.methods.pcff_rate <= 1.0))
        throw ConfigError("methods.pcff.rate: must lie in [0, 1]");
    }
  }
  try {
    LayeredChainGraph probe(cfg.graph);
    check_loss(probe, tc.loss);
  } catch (const Error& e) {
    throw ConfigError(std::string("train.loss: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return parse_experiment(read_json_file(path), path.parent_path().empty() ? "." : path.parent_path());
}

struct DataSplits {
  Dataset train;  ///< training pool (validation is split off inside train())
  Dataset test;
};

inline DataSplits load_data(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.data;
  const std::uint64_t seed = d.seed.value_or(cfg.seed);
  DataSplits out;
  if (d.kind == "idx") {
    out.train = to_dataset(load_idx(d.train_images, d.train_labels), d.classes, d.train_limit);
    out.test = to_dataset(load_idx(d.test_images, d.test_labels), d.classes, d.test_limit);
  } else if (d.kind == "blobs") {
    // one draw so train and test share the class centres; the generator
    // interleaves classes, so the first block holds per_class of each
    Dataset all = synth_blobs(d.classes, d.per_class + d.test_per_class, d.dim, d.separation, seed);
    const auto n_train = static_cast<std::ptrdiff_t>(d.per_class) * d.classes;
    out.train = Dataset{{all.examples.begin(), all.examples.begin() + n_train}, all.input_dim, all.classes};
    out.test = Dataset{{all.examples.begin() + n_train, all.examples.end()}, all.input_dim, all.classes};
  } else {
    Dataset all = synth_sequences(d.length, d.train_count + d.test_count, seed);
    out.train = Dataset{{all.examples.begin(), all.examples.begin() + d.train_count}, all.input_dim, all.classes};
    out.test = Dataset{{all.examples.begin() + d.train_count, all.examples.end()}, all.input_dim, all.classes};
  }
  return out;
}

/// Rejects data whose input width or label range does not fit the graph.
inline void check_data_fits(const ExperimentConfig& cfg, const DataSplits& data) {
  const LayeredChainGraph graph(cfg.graph);
  if (graph.input_rows() != data.train.input_dim)
    throw ConfigError("data: input dimension " + std::to_string(data.train.input_dim) +
                      " does not match the graph's " + std::to_string(graph.input_rows()) + " input features");
  if (graph.rows(graph.output_layer()) < data.train.classes)
    throw ConfigError("data: " + std::to_string(data.train.classes) + " classes but the output layer has " +
                      std::to_string(graph.rows(graph.output_layer())) + " features");
  if (data.train.empty()) throw ConfigError("data: empty training set");
}

/// Graph and training mode for one method; the dropout variant adds the
/// auxiliary-node annotations, the others use the configured graph as is.
inline std::pair<GraphSpec, TrainingMode> method_variant(const ExperimentConfig& cfg, const std::string& method) {
  if (method == "none") return {cfg.graph, FeedForwardTraining{}};
  if (method == "pcff") return {cfg.graph, PcffTraining{cfg.methods.pcff_rate}};
  if (method == "dropout") {
    const auto layers = cfg.methods.dropout_layers.empty() ? hidden_layers(cfg.graph) : cfg.methods.dropout_layers;
    return {augment_dropout(cfg.graph, layers, cfg.methods.dropout_keep), DropoutTraining{cfg.methods.dropout_keep}};
  }
  throw ConfigError("unknown method '" + method + "' (expected none, dropout or pcff)");
}

struct RunOutcome {
  LayeredChainGraph model;
  TrainResult result;
  EvalResult test;
  std::uint64_t seed = 0;
};

/// Run r (1-based) uses seed cfg.seed + r - 1 for initialization, the
/// validation split, shuffling and all stochastic decisions.
inline RunOutcome run_method(const ExperimentConfig& cfg, const DataSplits& data, const std::string& method, int run) {
  auto [spec, mode] = method_variant(cfg, method);
  const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(run - 1);
  LayeredChainGraph graph(std::move(spec));
  init_params(graph, cfg.init, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.mode = mode;
  TrainResult result = train(graph, data.train, tc);
  const EvalResult test = data.test.empty() ? EvalResult{} : evaluate(graph, data.test, tc.loss);
  return {std::move(graph), std::move(result), test, seed};
}

}  // namespace lcg
