// lcg: train, evaluate, compare and verify layered chain graph networks.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or configuration
// error, 3 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lcg/csv.hpp"
#include "lcg/experiment.hpp"
#include "lcg/serialize.hpp"
#include "lcg/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> runs;
  std::string methods = "none,dropout,pcff";
  std::string model;
  std::string check;
  std::string check_positional;
  std::optional<double> tolerance;
};

lcg::ExperimentConfig load_config(const Options& o) {
  lcg::ExperimentConfig cfg = lcg::load_experiment(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.runs) {
    if (*o.runs < 1) throw lcg::ConfigError("--runs: must be at least 1");
    cfg.runs = *o.runs;
  }
  return cfg;
}

fs::path prepare_out(const fs::path& dir) {
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw lcg::Error("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<std::string> history_row(const std::vector<std::string>& prefix, const lcg::EpochRecord& r) {
  std::vector<std::string> row = prefix;
  row.push_back(std::to_string(r.epoch));
  for (double v : {r.train_loss, r.train_err, r.val_loss, r.val_err}) row.push_back(lcg::format_double(v));
  return row;
}

int cmd_train(const Options& o) {
  const lcg::ExperimentConfig cfg = load_config(o);
  const lcg::DataSplits data = lcg::load_data(cfg);
  lcg::check_data_fits(cfg, data);
  const fs::path out = prepare_out(cfg.out);

  lcg::CsvTable history({"run", "epoch", "train_loss", "train_err", "val_loss", "val_err"});
  lcg::CsvTable tests({"run", "seed", "test_err", "test_loss"});
  for (int run = 1; run <= cfg.runs; ++run) {
    const lcg::RunOutcome r = lcg::run_method(cfg, data, cfg.method, run);
    for (const auto& rec : r.result.history) history.add_row(history_row({std::to_string(run)}, rec));
    tests.add_row({std::to_string(run), std::to_string(r.seed), lcg::format_double(r.test.error_rate),
                   lcg::format_double(r.test.mean_loss)});
    const std::string name = run == 1 ? "model.json" : "model-run" + std::to_string(run) + ".json";
    write_text(out / name, lcg::model_to_json(r.model).dump(1) + "\n");
    std::cout << "run " << run << ": best epoch " << r.result.best_epoch << ", test_err "
              << lcg::format_double(r.test.error_rate) << ", test_loss " << lcg::format_double(r.test.mean_loss)
              << "\n";
  }
  history.write(out / "history.csv");
  tests.write(out / "test.csv");
  return kExitOk;
}

std::vector<std::string> parse_methods(const std::string& list) {
  std::vector<std::string> methods;
  std::stringstream ss(list);
  std::string m;
  while (std::getline(ss, m, ',')) {
    if (m.empty()) continue;
    if (std::find(lcg::known_methods().begin(), lcg::known_methods().end(), m) == lcg::known_methods().end())
      throw lcg::ConfigError("--methods: unknown method '" + m + "' (expected none, dropout or pcff)");
    methods.push_back(m);
  }
  if (methods.empty()) throw lcg::ConfigError("--methods: no methods given");
  return methods;
}

int cmd_compare(const Options& o) {
  const auto methods = parse_methods(o.methods);
  const lcg::ExperimentConfig cfg = load_config(o);
  const lcg::DataSplits data = lcg::load_data(cfg);
  lcg::check_data_fits(cfg, data);
  if (data.test.empty()) throw lcg::ConfigError("data: compare needs a test split");
  const fs::path out = prepare_out(cfg.out);

  lcg::CsvTable results({"method", "run", "test_err", "test_loss", "seed"});
  lcg::CsvTable history({"method", "run", "epoch", "train_loss", "train_err", "val_loss", "val_err"});
  for (const auto& method : methods) {
    double err_sum = 0.0, loss_sum = 0.0;
    for (int run = 1; run <= cfg.runs; ++run) {
      const lcg::RunOutcome r = lcg::run_method(cfg, data, method, run);
      for (const auto& rec : r.result.history) history.add_row(history_row({method, std::to_string(run)}, rec));
      results.add_row({method, std::to_string(run), lcg::format_double(r.test.error_rate),
                       lcg::format_double(r.test.mean_loss), std::to_string(r.seed)});
      err_sum += r.test.error_rate;
      loss_sum += r.test.mean_loss;
      std::cout << method << " run " << run << ": test_err " << lcg::format_double(r.test.error_rate) << "\n";
    }
    const double err = err_sum / cfg.runs, loss = loss_sum / cfg.runs;
    results.add_row({method, "mean", lcg::format_double(err), lcg::format_double(loss), ""});
    std::cout << method << " mean: test_err " << lcg::format_double(err) << ", test_loss " << lcg::format_double(loss)
              << "\n";
  }
  results.write(out / "results.csv");
  history.write(out / "history.csv");
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (!fs::exists(o.model)) throw lcg::ConfigError("--model: file '" + o.model + "' not found");
  const lcg::LayeredChainGraph model = lcg::model_from_json(lcg::read_json_file(o.model));
  const lcg::ExperimentConfig cfg = load_config(o);
  const lcg::DataSplits data = lcg::load_data(cfg);
  if (data.test.empty()) throw lcg::ConfigError("data: eval needs a test split");
  if (model.input_rows() != data.test.input_dim)
    throw lcg::ConfigError("--model: input width does not match the configured data");
  try {
    lcg::check_loss(model, cfg.train.loss);
  } catch (const lcg::Error& e) {
    throw lcg::ConfigError(std::string("train.loss: ") + e.what());
  }
  const lcg::EvalResult r = lcg::evaluate(model, data.test, cfg.train.loss);
  const fs::path out = prepare_out(cfg.out);
  lcg::CsvTable table({"examples", "test_loss", "test_err"});
  table.add_row({std::to_string(data.test.size()), lcg::format_double(r.mean_loss), lcg::format_double(r.error_rate)});
  table.write(out / "eval.csv");
  std::cout << "test_loss " << lcg::format_double(r.mean_loss) << " test_err " << lcg::format_double(r.error_rate)
            << "\n";
  return kExitOk;
}

int cmd_verify(const Options& o) {
  static const std::vector<std::string> checks = {"activations", "marginals", "dropout", "residual", "gradients"};
  std::string name = !o.check.empty() ? o.check : o.check_positional;
  if (name.empty()) name = "all";
  if (name != "all" && std::find(checks.begin(), checks.end(), name) == checks.end())
    throw lcg::ConfigError("--check: unknown check '" + name +
                           "' (expected activations, marginals, dropout, residual, gradients or all)");
  lcg::VerifyOptions vo;
  vo.seed = o.seed.value_or(0);
  vo.tolerance = o.tolerance;
  const fs::path out = prepare_out(o.out.value_or("out"));

  bool all_passed = true;
  for (const auto& c : checks) {
    if (name != "all" && name != c) continue;
    lcg::VerificationReport report;
    if (c == "activations") report = lcg::verify_activations({}, 200, 1'000'000, vo);
    if (c == "marginals") report = lcg::verify_marginals({}, vo);
    if (c == "dropout") report = lcg::verify_dropout_scaling(lcg::DropoutStudy{}, vo);
    if (c == "residual") report = lcg::verify_residual({}, vo);
    if (c == "gradients") report = lcg::verify_gradients({}, vo);
    report.records_table().write(out / ("verify-" + c + ".csv"));
    if (!report.data.rows().empty()) report.data.write(out / ("verify-" + c + "-data.csv"));
    std::cout << report.summary() << "\n";
    all_passed = all_passed && report.passed();
  }
  return all_passed ? kExitOk : kExitVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layered chain graph networks: train, eval, compare, verify"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Global seed (overrides the config)");
    sub->add_option("--out", o.out, "Output directory");
  };

  auto* train = app.add_subcommand("train", "Train a network; writes history.csv, test.csv, model.json");
  train->add_option("--config", o.config, "Experiment config JSON")->required();
  train->add_option("--runs", o.runs, "Number of runs");
  add_common(train);

  auto* compare = app.add_subcommand("compare", "Compare stochastic training methods; writes results.csv");
  compare->add_option("--config", o.config, "Experiment config JSON")->required();
  compare->add_option("--methods", o.methods, "Comma-separated subset of none,dropout,pcff");
  compare->add_option("--runs", o.runs, "Runs per method");
  add_common(compare);

  auto* eval = app.add_subcommand("eval", "Evaluate a saved model on the configured test split; writes eval.csv");
  eval->add_option("--model", o.model, "Model JSON")->required();
  eval->add_option("--config", o.config, "Experiment config JSON (data source and loss)")->required();
  add_common(eval);

  auto* verify = app.add_subcommand("verify", "Run oracle checks; writes verify-<check>.csv");
  verify->add_option("name", o.check_positional, "activations | marginals | dropout | residual | gradients | all");
  verify->add_option("--check", o.check, "Same as the positional check name");
  verify->add_option("--tolerance", o.tolerance, "Replace every record tolerance");
  add_common(verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(o);
    if (*compare) return cmd_compare(o);
    if (*eval) return cmd_eval(o);
    if (*verify) return cmd_verify(o);
  } catch (const lcg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const lcg::FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
