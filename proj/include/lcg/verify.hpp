#pragma once

// Oracle suite: each check compares library results against independent
// evaluations and records every comparison with its tolerance.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lcg/csv.hpp"
#include "lcg/distributions.hpp"
#include "lcg/graph.hpp"
#include "lcg/inference.hpp"
#include "lcg/rng.hpp"
#include "lcg/training.hpp"

namespace lcg {

struct VerificationRecord {
  std::string label;
  std::string inputs;  ///< "name=value;..." identifying the point
  double computed = 0.0;
  double oracle = 0.0;
  double error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return error <= tolerance; }  // NaN fails
};

struct VerificationReport {
  std::string check;
  std::string grid;  ///< grid or seed set
  std::vector<VerificationRecord> records;
  /// Auxiliary per-point data (e.g. Monte-Carlo scatter); not pass/fail.
  CsvTable data{{}};

  bool passed() const { return first_failure() == nullptr; }

  const VerificationRecord* first_failure() const {
    for (const auto& r : records)
      if (!r.passed()) return &r;
    return nullptr;
  }

  CsvTable records_table() const {
    CsvTable t({"check", "label", "inputs", "computed", "oracle", "error", "tolerance", "pass"});
    for (const auto& r : records)
      t.add_row({check, r.label, r.inputs, format_double(r.computed), format_double(r.oracle), format_double(r.error),
                 format_double(r.tolerance), r.passed() ? "1" : "0"});
    return t;
  }

  std::string summary() const {
    const auto failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.passed(); });
    if (failed == 0) return check + ": PASS (" + std::to_string(records.size()) + " records)";
    const VerificationRecord& f = *first_failure();
    return check + ": FAIL (" + std::to_string(failed) + " of " + std::to_string(records.size()) +
           " records; first: " + f.label + " [" + f.inputs + "] error " + format_double(f.error) + " > tolerance " +
           format_double(f.tolerance) + ")";
  }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Replaces every record tolerance when set.
  std::optional<double> tolerance;
};

namespace detail {

inline void add_record(VerificationReport& report, const VerifyOptions& opts, std::string label, std::string inputs,
                       double computed, double oracle, double error, double tolerance) {
  report.records.push_back({std::move(label), std::move(inputs), computed, oracle, error,
                            opts.tolerance.value_or(tolerance)});
}

inline std::string kv(const std::string& key, double v) { return key + "=" + format_double(v); }

inline Eigen::MatrixXd normal_matrix(Eigen::Index r, Eigen::Index c, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal(rng);
  return m;
}

inline Eigen::MatrixXd uniform_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform();
  return m;
}

/// Gaussian weights (init_params) plus N(0, bias_std^2) biases.
inline void randomize(LayeredChainGraph& graph, std::uint64_t seed, double bias_std) {
  init_params(graph, InitScheme::Gaussian, seed);
  Rng rng = Rng::stream(seed, 0, 1, StreamTag::Init);
  std::vector<bool> done(graph.params().tensors.size(), false);
  for (int l = 0; l < static_cast<int>(graph.layer_count()); ++l) {
    const int slot = graph.params().bias_slot[static_cast<std::size_t>(l)];
    if (slot < 0 || done[static_cast<std::size_t>(slot)]) continue;
    done[static_cast<std::size_t>(slot)] = true;
    graph.bias(l) = normal_matrix(graph.rows(l), 1, bias_std, rng);
  }
}

inline LayerSpec input_layer(const std::string& id, int size, NodeDistribution dist = Binary{0.0, 1.0}) {
  return {id, size, dist, true, std::nullopt, std::nullopt};
}

inline LayerSpec hidden_layer(const std::string& id, int size, NodeDistribution dist) {
  return {id, size, dist, false, std::nullopt, std::nullopt};
}

inline ConnectionSpec dense(const std::string& parent, const std::string& child) {
  ConnectionSpec c;
  c.parent = parent;
  c.child = child;
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// activations

struct ActivationGrid {
  double lo = -6.0;
  double hi = 6.0;
  double step = 0.01;

  int points() const { return static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1; }
  double at(int k) const { return lo + k * step; }
};

/// Closed-form activations against their analytic targets, the figure data
/// (closed form next to an n-sample Monte-Carlo mean per grid point) and
/// Monte-Carlo consistency of the rectified Gaussian at a few preactivations.
inline VerificationReport verify_activations(const ActivationGrid& grid = {}, long n_samples = 200,
                                             long mc_samples = 1'000'000, const VerifyOptions& opts = {}) {
  if (grid.points() < 1 || !(grid.step > 0.0)) throw DomainError("activation grid is empty");
  VerificationReport report;
  report.check = "activations";
  report.grid = "e in [" + format_double(grid.lo) + ", " + format_double(grid.hi) + "] step " + format_double(grid.step);
  report.data = CsvTable({"family", "e", "closed_form", "mc_mean", "mc_se", "mc_var", "target", "abs_error"});

  struct Family {
    std::string name;
    NodeDistribution dist;
    double (*target)(double);
    double min_abs_e;  // records only where |e| >= this
    double max_abs_e;  // and |e| <= this
    double tolerance;
  };
  const std::vector<Family> families = {
      {"sigmoid", Binary{0.0, 1.0}, [](double e) { return 1.0 / (1.0 + std::exp(-e)); }, 0.0,
       std::numeric_limits<double>::infinity(), 1e-12},
      {"tanh", Binary{-1.0, 1.0}, [](double e) { return std::tanh(e); }, 0.0, std::numeric_limits<double>::infinity(),
       1e-12},
      {"softplus", RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}}, [](double e) { return std::log1p(std::exp(e)); },
       0.0, 6.0, 0.05},
      {"relu", RectifiedGaussian{0.0, TanhModulatedStd{}}, [](double e) { return std::max(e, 0.0); }, 1.0, 6.0, 0.05},
      {"leaky_relu", RectifiedGaussian{1.0 / 3.0, TanhModulatedStd{}}, [](double e) { return std::max(e, e / 3.0); },
       1.0, 6.0, 0.05},
  };

  constexpr double kEdge = 1e-9;
  for (std::size_t f = 0; f < families.size(); ++f) {
    const Family& fam = families[f];
    for (int k = 0; k < grid.points(); ++k) {
      const double e = grid.at(k);
      const double g = activation_mean(fam.dist, e);
      const double target = fam.target(e);
      const double err = std::abs(g - target);
      const double a = std::abs(e);
      if (a >= fam.min_abs_e - kEdge && a <= fam.max_abs_e + kEdge)
        detail::add_record(report, opts, fam.name, detail::kv("e", e), g, target, err, fam.tolerance);
      if (n_samples > 0) {
        Rng rng = Rng::stream(opts.seed, f, static_cast<std::uint64_t>(k), StreamTag::Check);
        const McEstimate mc = mc_activation_estimate(fam.dist, Eigen::VectorXd::Constant(1, e), n_samples, rng);
        const bool many = mc.standard_error.has_value();
        report.data.add_row({fam.name, format_double(e), format_double(g), format_double(mc.mean(0)),
                             many ? format_double((*mc.standard_error)(0)) : "", many ? format_double(mc.variance(0)) : "",
                             format_double(target), format_double(err)});
      }
    }
  }

  // softmax against a direct evaluation on (e, e/2, -e)
  const Multilabel softmax{3};
  for (int k = 0; k < grid.points(); ++k) {
    const double e = grid.at(k);
    const Eigen::Vector3d v(e, 0.5 * e, -e);
    const Eigen::VectorXd g = activation_mean(softmax, v);
    const Eigen::Vector3d ex = v.array().exp();
    const Eigen::Vector3d target = ex / ex.sum();
    Eigen::Index worst = 0;
    const double err = (g - target).cwiseAbs().maxCoeff(&worst);
    detail::add_record(report, opts, "softmax", detail::kv("e", e), g(worst), target(worst), err, 1e-12);
  }

  const NodeDistribution relu = RectifiedGaussian{0.0, TanhModulatedStd{}};
  detail::add_record(report, opts, "relu_at_zero", detail::kv("e", 0.0), activation_mean(relu, 0.0), 0.0,
                     std::abs(activation_mean(relu, 0.0)), 1e-12);

  if (mc_samples > 1) {
    for (std::size_t f = 2; f < families.size(); ++f) {
      for (double e : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
        Rng rng = Rng::stream(opts.seed, 100 + f, static_cast<std::uint64_t>(e + 10.0), StreamTag::Check);
        const McEstimate mc = mc_activation_estimate(families[f].dist, Eigen::VectorXd::Constant(1, e), mc_samples, rng);
        const double g = activation_mean(families[f].dist, e);
        detail::add_record(report, opts, families[f].name + "_mc", detail::kv("e", e) + ";" + detail::kv("n", mc_samples),
                           g, mc.mean(0), std::abs(g - mc.mean(0)), 4.0 * (*mc.standard_error)(0));
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// feed-forward vs exact marginals

struct MarginalStudy {
  std::vector<int> sizes{2, 2, 2};  ///< input layer first
  NodeDistribution dist = Binary{0.0, 1.0};
  std::vector<double> scales{1.0, 0.1, 0.01};
  int seeds = 100;
  double small_scale_tolerance = 1e-3;  ///< applied at the smallest scale
  double min_decrease_fraction = 0.9;
};

/// Random sequential net per seed: N(0,1) biases, N(0,1) weights multiplied
/// by the scale, uniform [0,1] input features.
inline VerificationReport verify_marginals(const MarginalStudy& study = {}, const VerifyOptions& opts = {}) {
  if (study.sizes.size() < 2 || study.scales.empty() || study.seeds < 1) throw DomainError("empty marginal study");
  VerificationReport report;
  report.check = "marginals";
  report.grid = "seeds 0.." + std::to_string(study.seeds - 1) + ", scales";
  for (double g : study.scales) report.grid += " " + format_double(g);
  report.data = CsvTable({"seed", "scale", "max_abs_error"});

  GraphSpec spec;
  for (std::size_t l = 0; l < study.sizes.size(); ++l) {
    const std::string id = "x" + std::to_string(l);
    spec.layers.push_back(l == 0 ? detail::input_layer(id, study.sizes[l], study.dist)
                                 : detail::hidden_layer(id, study.sizes[l], study.dist));
    if (l > 0) spec.connections.push_back(detail::dense("x" + std::to_string(l - 1), id));
  }
  LayeredChainGraph graph(spec);

  const double smallest = *std::min_element(study.scales.begin(), study.scales.end());
  std::vector<std::vector<double>> errors(study.scales.size());
  for (int s = 0; s < study.seeds; ++s) {
    Rng rng = Rng::stream(opts.seed, static_cast<std::uint64_t>(s), 0, StreamTag::Check);
    std::vector<Eigen::MatrixXd> base_weights;
    for (int l = 1; l < static_cast<int>(graph.layer_count()); ++l) graph.bias(l) = detail::normal_matrix(graph.rows(l), 1, 1.0, rng);
    for (int k = 0; k < static_cast<int>(graph.connection_count()); ++k)
      base_weights.push_back(detail::normal_matrix(graph.weight(k).rows(), graph.weight(k).cols(), 1.0, rng));
    const Eigen::VectorXd input = detail::uniform_matrix(graph.input_rows(), 1, rng);

    auto error_at = [&](double scale) {
      for (int k = 0; k < static_cast<int>(graph.connection_count()); ++k)
        graph.weight(k) = scale * base_weights[static_cast<std::size_t>(k)];
      return exact_marginals(graph, input).max_abs_error;
    };
    if (s == 0) {
      const double err = error_at(0.0);
      detail::add_record(report, opts, "zero_scale", "seed=0;scale=0", err, 0.0, err, 1e-12);
    }
    for (std::size_t i = 0; i < study.scales.size(); ++i) {
      const double err = error_at(study.scales[i]);
      errors[i].push_back(err);
      report.data.add_row({std::to_string(s), format_double(study.scales[i]), format_double(err)});
      if (study.scales[i] == smallest)
        detail::add_record(report, opts, "small_scale_error",
                           "seed=" + std::to_string(s) + ";" + detail::kv("scale", study.scales[i]), err, 0.0, err,
                           study.small_scale_tolerance);
    }
  }
  for (std::size_t i = 0; i + 1 < study.scales.size(); ++i) {
    int decreased = 0;
    for (int s = 0; s < study.seeds; ++s)
      if (errors[i + 1][static_cast<std::size_t>(s)] < errors[i][static_cast<std::size_t>(s)]) ++decreased;
    const double fraction = static_cast<double>(decreased) / study.seeds;
    detail::add_record(report, opts, "decreasing_fraction",
                       detail::kv("from", study.scales[i]) + ";" + detail::kv("to", study.scales[i + 1]), fraction, 1.0,
                       1.0 - fraction, 1.0 - study.min_decrease_fraction);
  }
  return report;
}

// ---------------------------------------------------------------------------
// dropout scaling

/// Test-mode output of an annotated graph against the feed-forward output of
/// its weight-scaled copy, on `inputs` uniform random inputs.
inline VerificationReport verify_dropout_scaling(const LayeredChainGraph& graph, int inputs,
                                                 const VerifyOptions& opts = {}) {
  VerificationReport report;
  report.check = "dropout";
  report.grid = std::to_string(inputs) + " random inputs";
  const LayeredChainGraph scaled = scale_dropout_weights(graph);
  Rng rng = Rng::stream(opts.seed, 0, 0, StreamTag::Check);
  const Eigen::MatrixXd x = detail::uniform_matrix(graph.input_rows(), inputs, rng);
  const Eigen::MatrixXd test = feed_forward(graph, x, DropoutMode::Test).output();
  const Eigen::MatrixXd plain = feed_forward(scaled, x, DropoutMode::Off).output();
  for (int b = 0; b < inputs; ++b) {
    Eigen::Index worst = 0;
    const double err = (test.col(b) - plain.col(b)).cwiseAbs().maxCoeff(&worst);
    detail::add_record(report, opts, "scaled_weights", "input=" + std::to_string(b), test(worst, b), plain(worst, b), err,
                       1e-12);
  }
  return report;
}

struct DropoutStudy {
  double keep = 0.5;
  int inputs = 100;
  long mc_masks = 100'000;
};

/// Scaling identity on a random dense net with every non-output layer
/// annotated, plus a Monte-Carlo check that the mean train-mode
/// preactivation below one annotated layer equals its test-mode value.
inline VerificationReport verify_dropout_scaling(const DropoutStudy& study = {}, const VerifyOptions& opts = {}) {
  GraphSpec spec;
  spec.layers = {detail::input_layer("in", 6), detail::hidden_layer("h1", 8, Binary{-1.0, 1.0}),
                 detail::hidden_layer("h2", 7, RectifiedGaussian{0.0, TanhModulatedStd{}}),
                 detail::hidden_layer("out", 1, Multilabel{4})};
  spec.connections = {detail::dense("in", "h1"), detail::dense("h1", "h2"), detail::dense("h2", "out"),
                      detail::dense("in", "out")};

  LayeredChainGraph all(augment_dropout(spec, {"in", "h1", "h2"}, study.keep));
  detail::randomize(all, opts.seed, 0.5);
  VerificationReport report = verify_dropout_scaling(all, study.inputs, opts);
  report.grid += ", keep " + format_double(study.keep) + ", " + std::to_string(study.mc_masks) + " masks";

  if (study.mc_masks > 1) {
    LayeredChainGraph one(augment_dropout(spec, {"h1"}, study.keep));
    one.params() = all.params();
    const int h2 = one.layer_index("h2");
    Rng rng = Rng::stream(opts.seed, 1, 0, StreamTag::Check);
    const Eigen::VectorXd x = detail::uniform_matrix(one.input_rows(), 1, rng);
    const Eigen::VectorXd expected = feed_forward(one, x, DropoutMode::Test).e[static_cast<std::size_t>(h2)];

    constexpr long kBatch = 1000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(expected.size());
    Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(expected.size());
    // shifted sums keep the variance estimate well conditioned
    for (long done = 0; done < study.mc_masks; done += kBatch) {
      const long b = std::min(kBatch, study.mc_masks - done);
      const Eigen::MatrixXd xs = x.replicate(1, b);
      const auto fwd = dropout_forward_train(one, xs, opts.seed + 1, static_cast<std::uint64_t>(done));
      const Eigen::MatrixXd centred = fwd.state.e[static_cast<std::size_t>(h2)].colwise() - expected;
      sum += centred.rowwise().sum();
      sum_sq += centred.array().square().matrix().rowwise().sum();
    }
    const auto n = static_cast<double>(study.mc_masks);
    for (Eigen::Index i = 0; i < expected.size(); ++i) {
      const double mean = sum(i) / n;
      const double var = (sum_sq(i) - n * mean * mean) / (n - 1.0);
      const double se = std::sqrt(std::max(var, 0.0) / n);
      detail::add_record(report, opts, "train_mean_preactivation",
                         "node=" + std::to_string(i) + ";" + detail::kv("n", n), expected(i) + mean, expected(i),
                         std::abs(mean), 4.0 * se);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// refinement builder

namespace detail {

inline int weight_slot_of(const LayeredChainGraph& g, const std::string& tie) {
  for (int k = 0; k < static_cast<int>(g.connection_count()); ++k)
    if (g.connection(k).tie_group == tie) return g.params().weight_slot[static_cast<std::size_t>(k)];
  return -1;
}

inline int bias_slot_of(const LayeredChainGraph& g, const std::string& tie) {
  for (int l = 0; l < static_cast<int>(g.layer_count()); ++l)
    if (g.layer(l).bias_tie == tie) return g.params().bias_slot[static_cast<std::size_t>(l)];
  return -1;
}

/// Copies every tensor of `to` whose tie name also occurs in `from`.
inline void copy_tied_params(const LayeredChainGraph& from, LayeredChainGraph& to) {
  for (int k = 0; k < static_cast<int>(to.connection_count()); ++k) {
    const auto& tie = to.connection(k).tie_group;
    if (!tie) continue;
    if (const int s = weight_slot_of(from, *tie); s >= 0) to.weight(k) = from.params().tensors[static_cast<std::size_t>(s)];
  }
  for (int l = 0; l < static_cast<int>(to.layer_count()); ++l) {
    const auto& tie = to.layer(l).bias_tie;
    if (!tie) continue;
    if (const int s = bias_slot_of(from, *tie); s >= 0) to.bias(l) = from.params().tensors[static_cast<std::size_t>(s)];
  }
}

inline Eigen::MatrixXd activate(const NodeDistribution& dist, const Eigen::MatrixXd& e) {
  Eigen::MatrixXd q;
  activate_layer(dist, e, q);
  return q;
}

}  // namespace detail

/// Builds the refinement of (base, refining), randomizes it and compares its
/// feed-forward output with g(e_base(q) + e_refine(g(e_base(q)))) where the
/// two preactivations come from standalone graphs of the fragments carrying
/// the same parameters.
inline void append_refinement_records(VerificationReport& report, const Fragment& base, const Fragment& refining,
                                      const std::string& label, int inputs, std::uint64_t seed,
                                      const VerifyOptions& opts) {
  Fragment b = base;
  Fragment r = refining;
  detail::name_all_ties(b.spec, "base:");
  detail::name_all_ties(r.spec, "refine:");
  LayeredChainGraph built(build_refinement(b, r).spec);
  detail::randomize(built, seed, 0.5);

  LayeredChainGraph base_graph(b.spec);
  GraphSpec ref_spec = r.spec;
  for (auto& l : ref_spec.layers) {
    if (l.id == r.input) {
      l.is_input = true;
      l.bias_tie.reset();
    }
    if (l.id == r.output) l.bias_tie.reset();  // the refining output's bias is not used
  }
  LayeredChainGraph ref_graph(ref_spec);
  detail::copy_tied_params(built, base_graph);
  detail::copy_tied_params(built, ref_graph);
  ref_graph.bias(ref_graph.layer_index(r.output)).setZero();

  Rng rng = Rng::stream(seed, 2, 0, StreamTag::Check);
  const Eigen::MatrixXd x = detail::uniform_matrix(built.input_rows(), inputs, rng);
  const NodeDistribution& dist = built.layer(built.output_layer()).dist;
  const Eigen::MatrixXd em = feed_forward(base_graph, x).e.back();
  const Eigen::MatrixXd er = feed_forward(ref_graph, detail::activate(dist, em)).e.back();
  const Eigen::MatrixXd direct = detail::activate(dist, em + er);
  const Eigen::MatrixXd out = feed_forward(built, x).output();
  for (int k = 0; k < inputs; ++k) {
    Eigen::Index worst = 0;
    const double err = (out.col(k) - direct.col(k)).cwiseAbs().maxCoeff(&worst);
    detail::add_record(report, opts, label, "input=" + std::to_string(k), out(worst, k), direct(worst, k), err, 1e-12);
  }
}

struct ResidualStudy {
  int inputs = 100;
};

/// Refinement builder equivalence: zero refining weights reproduce the base
/// output; random scalar fragments (single-connection and two-layer refining
/// chains) match the composition formula; a depth-2 nesting matches the
/// recursive formula evaluated with plain matrix algebra.
inline VerificationReport verify_residual(const ResidualStudy& study = {}, const VerifyOptions& opts = {}) {
  VerificationReport report;
  report.check = "residual";
  report.grid = std::to_string(study.inputs) + " random inputs per case";
  const int n = study.inputs;
  const NodeDistribution tanh_dist = Binary{-1.0, 1.0};

  auto make_base = [&] {
    Fragment f;
    f.spec.layers = {detail::input_layer("in", 3), detail::hidden_layer("x", 4, tanh_dist)};
    f.spec.connections = {detail::dense("in", "x")};
    f.spec.connections[0].tie_group = "m";
    f.spec.layers[1].bias_tie = "bm";
    f.input = "in";
    f.output = "x";
    return f;
  };
  auto make_refining = [&](const std::string& tie) {
    Fragment f;
    f.spec.layers = {detail::input_layer("a", 4, tanh_dist), detail::hidden_layer("z", 4, tanh_dist)};
    f.spec.connections = {detail::dense("a", "z")};
    f.spec.connections[0].tie_group = tie;
    f.input = "a";
    f.output = "z";
    return f;
  };
  auto tensor = [](const LayeredChainGraph& g, const std::string& tie) -> Eigen::MatrixXd {
    const int s = detail::weight_slot_of(g, tie);
    return g.params().tensors[static_cast<std::size_t>(s >= 0 ? s : detail::bias_slot_of(g, tie))];
  };

  // zero refining weights
  {
    LayeredChainGraph built(build_refinement(make_base(), make_refining("r")).spec);
    detail::randomize(built, opts.seed, 0.5);
    built.params().tensors[static_cast<std::size_t>(detail::weight_slot_of(built, "r"))].setZero();
    LayeredChainGraph base_graph(make_base().spec);
    detail::copy_tied_params(built, base_graph);
    Rng rng = Rng::stream(opts.seed, 3, 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(3, n, rng);
    const Eigen::MatrixXd a = feed_forward(built, x).output();
    const Eigen::MatrixXd b = feed_forward(base_graph, x).output();
    for (int k = 0; k < n; ++k) {
      const double err = (a.col(k) - b.col(k)).cwiseAbs().maxCoeff();
      detail::add_record(report, opts, "zero_refining", "input=" + std::to_string(k), a(0, k), b(0, k), err, 1e-12);
    }
  }

  // single-connection refining fragment, explicit formula
  {
    LayeredChainGraph built(build_refinement(make_base(), make_refining("r")).spec);
    detail::randomize(built, opts.seed + 1, 0.5);
    const Eigen::MatrixXd wm = tensor(built, "m"), bm = tensor(built, "bm"), wr = tensor(built, "r");
    Rng rng = Rng::stream(opts.seed, 4, 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(3, n, rng);
    const Eigen::MatrixXd em = (wm * x).colwise() + bm.col(0);
    const Eigen::MatrixXd direct = (em + wr * em.array().tanh().matrix()).array().tanh();
    const Eigen::MatrixXd out = feed_forward(built, x).output();
    for (int k = 0; k < n; ++k) {
      const double err = (out.col(k) - direct.col(k)).cwiseAbs().maxCoeff();
      detail::add_record(report, opts, "scalar_fragment", "input=" + std::to_string(k), out(0, k), direct(0, k), err,
                         1e-12);
    }
  }

  // same formula via standalone fragment graphs, with a two-layer refining chain
  {
    Fragment chain;
    chain.spec.layers = {detail::input_layer("a", 4, tanh_dist),
                         detail::hidden_layer("h", 5, RectifiedGaussian{0.0, TanhModulatedStd{}}),
                         detail::hidden_layer("z", 4, tanh_dist)};
    chain.spec.connections = {detail::dense("a", "h"), detail::dense("h", "z"), detail::dense("a", "z")};
    chain.input = "a";
    chain.output = "z";
    append_refinement_records(report, make_base(), make_refining("r"), "fragment_graphs", n, opts.seed + 2, opts);
    append_refinement_records(report, make_base(), chain, "two_layer_refining", n, opts.seed + 3, opts);
  }

  // depth-2 nesting
  {
    const Fragment inner = build_refinement(make_base(), make_refining("r1"));
    LayeredChainGraph built(build_refinement(inner, make_refining("r2")).spec);
    detail::randomize(built, opts.seed + 4, 0.5);
    const Eigen::MatrixXd wm = tensor(built, "m"), bm = tensor(built, "bm");
    const Eigen::MatrixXd w1 = tensor(built, "r1"), w2 = tensor(built, "r2");
    Rng rng = Rng::stream(opts.seed, 5, 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(3, n, rng);
    const Eigen::MatrixXd em = (wm * x).colwise() + bm.col(0);
    const Eigen::MatrixXd z1 = em + w1 * em.array().tanh().matrix();
    const Eigen::MatrixXd z2 = z1 + w2 * z1.array().tanh().matrix();
    const Eigen::MatrixXd direct = z2.array().tanh();
    const Eigen::MatrixXd out = feed_forward(built, x).output();
    for (int k = 0; k < n; ++k) {
      const double err = (out.col(k) - direct.col(k)).cwiseAbs().maxCoeff();
      detail::add_record(report, opts, "nested_depth2", "input=" + std::to_string(k), out(0, k), direct(0, k), err,
                         1e-12);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// gradients

namespace detail {

inline double batch_loss(const LayeredChainGraph& graph, const Eigen::MatrixXd& x, std::span<const int> labels,
                         const LossSpec& loss, const StochasticMask* frozen) {
  PassSettings s;
  s.replay = frozen;
  const ActivationState st = run_forward(graph, x, s).state;
  double total = 0.0;
  for (Eigen::Index b = 0; b < x.cols(); ++b)
    total += loss_eval(loss, st.output().col(b), st.e.back().col(b), labels[static_cast<std::size_t>(b)]);
  return total;
}

struct GradientComparison {
  double max_rel_error = 0.0;
  int worst_slot = -1;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// backward() against central differences over every free scalar parameter.
/// With `frozen`, the stochastic decisions and noise of that pass are replayed.
inline GradientComparison compare_gradients(LayeredChainGraph& graph, const Eigen::MatrixXd& x,
                                            std::span<const int> labels, const LossSpec& loss, double h,
                                            const StochasticMask* frozen) {
  PassSettings s;
  s.replay = frozen;
  const ForwardResult fwd = run_forward(graph, x, s);
  const GradientSet grads = backward(graph, fwd.state, fwd.mask, loss_gradient(loss, fwd.state, labels));

  GradientComparison out;
  auto& store = graph.params();
  for (std::size_t slot = 0; slot < store.tensors.size(); ++slot) {
    if (!store.trainable[slot]) continue;
    auto& t = store.tensors[slot];
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (store.structure[slot].size() != 0 && store.structure[slot](i) == 0.0) continue;
      const double saved = t(i);
      t(i) = saved + h;
      const double up = batch_loss(graph, x, labels, loss, frozen);
      t(i) = saved - h;
      const double down = batch_loss(graph, x, labels, loss, frozen);
      t(i) = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads.tensors[slot](i);
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
      if (rel > out.max_rel_error || out.worst_slot < 0) {
        out = {std::max(rel, out.max_rel_error), static_cast<int>(slot), i, analytic, numeric};
      }
    }
  }
  return out;
}

/// Smooth test nets on a 4-dimensional input; kind cycles through three layouts.
inline std::pair<GraphSpec, LossSpec> gradient_net(int kind) {
  GraphSpec spec;
  const NodeDistribution softplus = RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}};
  const NodeDistribution leaky = RectifiedGaussian{1.0 / 3.0, TanhModulatedStd{}};
  switch (kind % 3) {
    case 0: {  // sigmoid, softplus, masked and skip connections, softmax output
      spec.layers = {input_layer("in", 4), hidden_layer("s", 5, Binary{0.0, 1.0}), hidden_layer("r", 4, softplus),
                     hidden_layer("out", 1, Multilabel{3})};
      ConnectionSpec masked = dense("in", "r");
      masked.pattern = Pattern::Masked;
      masked.mask = BoolMatrix::Constant(4, 4, false);
      for (int i = 0; i < 4; ++i) {
        masked.mask(i, i) = true;
        masked.mask(i, (i + 1) % 4) = true;
      }
      spec.connections = {dense("in", "s"), dense("s", "r"), masked, dense("r", "out"), dense("in", "out")};
      return {spec, LossSpec{LossKind::CrossEntropy}};
    }
    case 1: {  // tanh with tied and diagonal connections, squared error on binary outputs
      spec.layers = {input_layer("in", 4), hidden_layer("t1", 4, Binary{-1.0, 1.0}),
                     hidden_layer("t2", 4, Binary{-1.0, 1.0}), hidden_layer("out", 3, Binary{0.0, 1.0})};
      ConnectionSpec a = dense("in", "t1"), b = dense("t1", "t2"), diag = dense("in", "t2");
      a.tie_group = b.tie_group = "shared";
      diag.pattern = Pattern::Diagonal;
      spec.connections = {a, b, diag, dense("t2", "out")};
      return {spec, LossSpec{LossKind::SquaredError}};
    }
    default: {  // leaky rectified, hidden softmax groups, softmax output
      spec.layers = {input_layer("in", 4), hidden_layer("a", 6, leaky), hidden_layer("m", 2, Multilabel{3}),
                     hidden_layer("out", 1, Multilabel{3})};
      spec.connections = {dense("in", "a"), dense("a", "m"), dense("m", "out"), dense("a", "out")};
      return {spec, LossSpec{LossKind::CrossEntropy}};
    }
  }
}

}  // namespace detail

struct GradientStudy {
  int seeds = 10;
  double h = 1e-5;
  double tolerance = 1e-4;
  double linear_tolerance = 1e-8;
  /// The linear net's loss is quadratic, so central differences are exact at
  /// any step; a wide step keeps rounding below the tighter tolerance.
  double linear_h = 1e-2;
};

/// Central-difference gradient checks on random smooth nets, a linear net
/// and a PCFF pass with its sampling decisions and noise held fixed.
inline VerificationReport verify_gradients(const GradientStudy& study = {}, const VerifyOptions& opts = {}) {
  VerificationReport report;
  report.check = "gradients";
  report.grid = "seeds 0.." + std::to_string(study.seeds - 1) + ", h " + format_double(study.h);
  constexpr int kBatch = 3;

  auto record = [&](const std::string& label, const std::string& inputs, const detail::GradientComparison& c,
                    double tol) {
    detail::add_record(report, opts, label,
                       inputs + ";slot=" + std::to_string(c.worst_slot) + ";index=" + std::to_string(c.worst_index),
                       c.analytic, c.numeric, c.max_rel_error, tol);
  };
  auto labels_for = [](Rng& rng, int classes) {
    std::vector<int> labels(kBatch);
    for (auto& l : labels) l = static_cast<int>(rng.uniform() * classes);
    return labels;
  };

  for (int s = 0; s < study.seeds; ++s) {
    const auto [spec, loss] = detail::gradient_net(s);
    LayeredChainGraph graph(spec);
    detail::randomize(graph, opts.seed + static_cast<std::uint64_t>(s), 0.5);
    Rng rng = Rng::stream(opts.seed, static_cast<std::uint64_t>(s), 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(4, kBatch, rng);
    const auto labels = labels_for(rng, 3);
    record("smooth_net", "seed=" + std::to_string(s), detail::compare_gradients(graph, x, labels, loss, study.h, nullptr),
           study.tolerance);
  }

  {
    const NodeDistribution identity = RectifiedGaussian{1.0, ConstantStd{1.0}};
    GraphSpec spec;
    spec.layers = {detail::input_layer("in", 3), detail::hidden_layer("l1", 4, identity),
                   detail::hidden_layer("out", 2, identity)};
    spec.connections = {detail::dense("in", "l1"), detail::dense("l1", "out")};
    LayeredChainGraph graph(spec);
    detail::randomize(graph, opts.seed + 1000, 0.5);
    Rng rng = Rng::stream(opts.seed, 1000, 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(3, kBatch, rng);
    const auto labels = labels_for(rng, 2);
    record("linear_net", "seed=0",
           detail::compare_gradients(graph, x, labels, LossSpec{LossKind::SquaredError}, study.linear_h, nullptr),
           study.linear_tolerance);
  }

  {
    GraphSpec spec;
    spec.layers = {detail::input_layer("in", 4), detail::hidden_layer("a", 6, RectifiedGaussian{0.0, TanhModulatedStd{}}),
                   detail::hidden_layer("b", 5, RectifiedGaussian{0.0, ConstantStd{kSoftplusStd}}),
                   detail::hidden_layer("out", 1, Multilabel{3})};
    spec.connections = {detail::dense("in", "a"), detail::dense("a", "b"), detail::dense("b", "out")};
    LayeredChainGraph graph(spec);
    detail::randomize(graph, opts.seed + 2000, 0.5);
    Rng rng = Rng::stream(opts.seed, 2000, 0, StreamTag::Check);
    const Eigen::MatrixXd x = detail::uniform_matrix(4, kBatch, rng);
    const auto labels = labels_for(rng, 3);
    const ForwardResult pass = pcff_forward(graph, x, 0.5, opts.seed + 2000, 0, true);
    record("pcff_frozen_noise", "rate=0.5;sampled=" + std::to_string(pass.mask.sampled_count()),
           detail::compare_gradients(graph, x, labels, LossSpec{LossKind::CrossEntropy}, study.h, &pass.mask),
           study.tolerance);
  }
  return report;
}

}  // namespace lcg
