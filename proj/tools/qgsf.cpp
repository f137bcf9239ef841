// qgsf: experiment driver for filtering with quantized outputs.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "qgsf/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDegenerate = 3;

qgsf::ExperimentConfig config_or_scenario(const std::string& config_path, const std::string& scenario) {
  if (!config_path.empty()) return qgsf::load_config(config_path);
  nlohmann::json j{{"scenario", scenario}};
  return qgsf::config_from_json(j);
}

void keep_steps_within_horizon(qgsf::ExperimentConfig& config) {
  auto& steps = config.pdf_steps;
  steps.erase(std::remove_if(steps.begin(), steps.end(), [&](std::size_t s) { return s > config.horizon; }),
              steps.end());
}

int train_indicator(int k1, std::size_t samples, std::uint64_t seed, int max_iter, double tol,
                    const std::string& out) {
  qgsf::EmConfig em;
  em.max_iter = max_iter;
  em.tol = tol;
  const auto model = qgsf::train_unit_gmm(samples, k1, seed, em);
  qgsf::save_model(model, out);
  fmt::print("K1={} samples={} iterations={} loglik/sample={:.9f} resets={} -> {}\n", model.size(), samples,
             model.em_iterations, model.final_loglik, model.collapse_resets, out);
  return kExitOk;
}

int simulate_cmd(const std::string& config_path, const std::string& scenario, std::size_t horizon,
                 std::uint64_t seed, const std::string& out) {
  auto config = config_or_scenario(config_path, scenario);
  if (horizon > 0) config.horizon = horizon;
  const auto& sc = config.scenario;
  const auto traj = qgsf::simulate(sc.model, sc.quantizer, sc.inputs, config.horizon, seed);
  qgsf::write_trajectory_csv(traj, out);
  fmt::print("wrote {} steps to {}\n", traj.length(), out);
  return kExitOk;
}

int run_cmd(const std::string& config_path, bool quick, const std::string& out_dir, std::size_t runs,
            std::size_t threads) {
  auto config = qgsf::load_config(config_path);
  if (quick) {
    config.runs = 20;
    config.horizon = 50;
    keep_steps_within_horizon(config);
  }
  if (runs > 0) config.runs = runs;
  if (threads > 0) config.threads = threads;
  if (!out_dir.empty()) config.output_dir = out_dir;
  config.validate();

  const auto base = qgsf::resolve_indicator_model(config.indicator);
  auto summary = qgsf::run_experiment(config, base);
  if (config.scenario.model.n() <= 2 && !config.pdf_steps.empty() &&
      std::find(config.filters.begin(), config.filters.end(), qgsf::FilterKind::Gsf) != config.filters.end()) {
    summary.pdfs = qgsf::compare_pdfs(config, base, config.pdf_steps);
  }
  qgsf::emit_outputs(summary, config.output_dir);
  fmt::print("{} runs x {} filters -> {}\n", config.runs, config.filters.size(), config.output_dir.string());
  for (const auto& r : summary.records) {
    if (!r.ok) fmt::print(stderr, "run {} {}: {}\n", r.run, qgsf::filter_name(r.filter), r.error);
  }
  return summary.degenerate_only() ? kExitDegenerate : kExitOk;
}

int compare_pdfs_cmd(const std::string& config_path, std::vector<std::size_t> steps, const std::string& out_dir) {
  auto config = qgsf::load_config(config_path);
  if (steps.empty()) steps = config.pdf_steps;
  if (!out_dir.empty()) config.output_dir = out_dir;
  const auto base = qgsf::resolve_indicator_model(config.indicator);
  qgsf::MCSummary summary;
  summary.config = qgsf::config_to_json(config);
  summary.state_dim = config.scenario.model.n();
  summary.pdfs = qgsf::compare_pdfs(config, base, steps);
  std::filesystem::create_directories(config.output_dir);
  qgsf::emit_outputs(summary, config.output_dir);
  fmt::print("{:>6} {:>10} {:>10}\n", "step", "TV(gsf)", "TV(qkf)");
  for (const auto& p : summary.pdfs) fmt::print("{:>6} {:>10.4f} {:>10.4f}\n", p.step, p.tv_gsf, p.tv_qkf);
  return kExitOk;
}

std::string cell(const nlohmann::json& v) {
  if (v.is_number()) return fmt::format("{:.4g}", v.get<double>());
  return "-";
}

int report_cmd(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw qgsf::ConfigError("cannot open " + path);
  nlohmann::json s;
  try {
    s = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw qgsf::ConfigError(path + ": " + e.what());
  }
  if (!s.contains("filters") || !s["filters"].is_object()) throw qgsf::ConfigError(path + ": not a summary file");

  const int n = s.value("state_dim", 0);
  fmt::print("{} runs, horizon {}\n\n", s.value("runs", 0), s.value("horizon", 0));
  std::string header = fmt::format("{:<6}{:>6}", "filter", "ok");
  for (int d = 1; d <= n; ++d) header += fmt::format("{:>14}", fmt::format("med MSE x{}", d));
  header += fmt::format("{:>14}{:>14}{:>12}", "med MSE sum", "time mean s", "time std s");
  fmt::print("{}\n", header);
  for (const auto& [name, f] : s["filters"].items()) {
    std::string line = fmt::format("{:<6}{:>6}", name, f.value("successful_runs", 0));
    for (int d = 0; d < n; ++d) line += fmt::format("{:>14}", cell(f["mse_median"][static_cast<std::size_t>(d)]));
    line += fmt::format("{:>14}{:>14}{:>12}", cell(f["mse_total_median"]), cell(f["seconds_mean"]),
                        cell(f["seconds_std"]));
    fmt::print("{}\n", line);
  }
  if (s.contains("pdf_comparisons") && !s["pdf_comparisons"].empty()) {
    fmt::print("\n{:>6}{:>12}{:>12}\n", "step", "TV(gsf,gt)", "TV(qkf,gt)");
    for (const auto& p : s["pdf_comparisons"]) {
      fmt::print("{:>6}{:>12}{:>12}\n", p.value("step", 0), cell(p["tv_gsf_gt"]), cell(p["tv_qkf_gt"]));
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian sum filtering for linear systems with quantized outputs"};
  app.require_subcommand(1);

  int k1 = 20;
  std::size_t samples = 1'000'000;
  std::uint64_t train_seed = 1;
  int max_iter = 500;
  double tol = 1e-7;
  std::string model_out = "unit_gmm.json";
  auto* train = app.add_subcommand("train-indicator", "fit the unit-interval GMM by EM and write a model file");
  train->add_option("--k1", k1, "number of mixture components")->check(CLI::PositiveNumber);
  train->add_option("--samples", samples, "uniform training samples");
  train->add_option("--seed", train_seed, "sampling seed");
  train->add_option("--max-iter", max_iter, "EM iteration limit");
  train->add_option("--tol", tol, "EM tolerance on the per-sample log-likelihood");
  train->add_option("-o,--out", model_out, "output model file");

  std::string config_path;
  std::string scenario = "siso";
  std::size_t horizon = 0;
  std::uint64_t sim_seed = 1;
  std::string traj_out = "trajectory.csv";
  auto* sim = app.add_subcommand("simulate", "simulate one trajectory and write it as CSV");
  auto* sim_config = sim->add_option("-c,--config", config_path, "experiment config file")->check(CLI::ExistingFile);
  sim->add_option("--scenario", scenario, "built-in scenario")
      ->check(CLI::IsMember({"siso", "mimo"}))
      ->excludes(sim_config);
  sim->add_option("-T,--horizon", horizon, "number of steps (default from config)");
  sim->add_option("--seed", sim_seed, "simulation seed");
  sim->add_option("-o,--out", traj_out, "output CSV");

  bool quick = false;
  std::string out_dir;
  std::size_t runs = 0;
  std::size_t threads = 0;
  auto* run = app.add_subcommand("run", "Monte Carlo experiment from a config file");
  run->add_option("-c,--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  run->add_flag("--quick", quick, "20 runs of 50 steps");
  run->add_option("-o,--out", out_dir, "output directory (overrides config)");
  run->add_option("--runs", runs, "number of runs (overrides config)");
  run->add_option("--threads", threads, "worker threads (overrides config)");

  std::vector<std::size_t> steps;
  auto* pdfs = app.add_subcommand("compare-pdfs", "GSF and QKF posteriors against a large particle filter");
  pdfs->add_option("-c,--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  pdfs->add_option("--steps", steps, "time steps (default from config)");
  pdfs->add_option("-o,--out", out_dir, "output directory (overrides config)");

  std::string summary_path;
  auto* report = app.add_subcommand("report", "print summary.json as a table");
  report->add_option("summary", summary_path, "summary.json")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return train_indicator(k1, samples, train_seed, max_iter, tol, model_out);
    if (*sim) return simulate_cmd(config_path, scenario, horizon, sim_seed, traj_out);
    if (*run) return run_cmd(config_path, quick, out_dir, runs, threads);
    if (*pdfs) return compare_pdfs_cmd(config_path, steps, out_dir);
    if (*report) return report_cmd(summary_path);
  } catch (const qgsf::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const qgsf::ModelFormatError& e) {
    fmt::print(stderr, "model file error: {}\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    fmt::print(stderr, "invalid argument: {}\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
