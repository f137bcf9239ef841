#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "qgsf/harness.hpp"

using namespace qgsf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kModelPath = fs::path(QGSF_DATA_DIR) / "unit_gmm_k20.json";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("qgsf_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

json small_config(const std::string& scenario) {
  return json{{"scenario", scenario},
              {"horizon", 20},
              {"runs", 4},
              {"seed", 11},
              {"threads", 2},
              {"indicator", {{"model", kModelPath.string()}}},
              {"pf", {{"particles", 100}}},
              {"ground_truth", {{"particles", 2000}}},
              {"pdf", {{"steps", {5, 10}}}}};
}

const UnitIntervalGmm& base_model() {
  static const UnitIntervalGmm m = load_model(kModelPath);
  return m;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(QGSF_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

TEST(Config, DefaultsAreValid) {
  const auto c = config_from_json(json::object());
  EXPECT_EQ(c.scenario_name, "siso");
  EXPECT_EQ(c.runs, 100U);
  EXPECT_EQ(c.horizon, 100U);
  EXPECT_EQ(c.filters.size(), 4U);
  EXPECT_EQ(c.gsf.reduction_cap, 20U);
  EXPECT_EQ(c.bins_per_axis(), 100U);
  EXPECT_EQ(config_from_json(json{{"scenario", "mimo"}}).bins_per_axis(), 30U);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(config_from_json(json{{"horizn", 10}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"gsf", {{"cap", 10}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"pf", {{"particles", 10}, {"extra", 1}}}}), ConfigError);
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_THROW(config_from_json(json{{"scenario", "miso"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"runs", 0}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"horizon", "ten"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"filters", {"gsf", "ekf"}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"filters", {"gsf", "gsf"}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"pf", {{"resample_threshold", 1.5}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"horizon", 20}, {"pdf", {{"steps", {25}}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"gsf", {{"alpha", -1.0}}}}), ConfigError);
}

TEST(Config, CustomScenarioParsesAndRoundTrips) {
  const json scenario{{"A", 0.5},
                      {"B", 1.0},
                      {"C", {{1.0}, {2.0}}},
                      {"D", {{0.0}, {0.0}}},
                      {"Q", 1.0},
                      {"R", {{0.1, 0.0}, {0.0, 0.2}}},
                      {"mu1", 0.0},
                      {"P1", 1.0},
                      {"step", 2.0},
                      {"input_mean", 0.0},
                      {"input_covariance", 1.0}};
  const auto c = config_from_json(json{{"scenario", scenario}});
  EXPECT_EQ(c.scenario_name, "custom");
  EXPECT_EQ(c.scenario.model.p(), 2);
  EXPECT_EQ(c.scenario.quantizer.step()(1), 2.0);
  EXPECT_EQ(c.scenario.model.R(1, 1), 0.2);
  const auto again = config_from_json(config_to_json(c));
  EXPECT_EQ(again.scenario.model.C, c.scenario.model.C);
  EXPECT_EQ(config_to_json(again), config_to_json(c));
}

TEST(Config, CustomScenarioShapeMismatchIsConfigError) {
  json scenario{{"A", 0.5}, {"B", 1.0}, {"C", {{1.0, 1.0}}}, {"D", 0.0}, {"Q", 1.0}, {"R", 0.1},
                {"mu1", 0.0}, {"P1", 1.0}, {"step", 2.0}, {"input_mean", 0.0}, {"input_covariance", 1.0}};
  EXPECT_THROW(config_from_json(json{{"scenario", scenario}}), ConfigError);
  scenario.erase("Q");
  EXPECT_THROW(config_from_json(json{{"scenario", scenario}}), ConfigError);
}

TEST(Config, LoadReportsParseErrors) {
  const auto dir = scratch("badjson");
  std::ofstream(dir / "c.json") << "{\"runs\": 3,,}";
  EXPECT_THROW(load_config(dir / "c.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Config, IndicatorModelMismatchIsConfigError) {
  IndicatorSource src;
  src.model_path = kModelPath;
  src.k1 = 10;
  EXPECT_THROW(resolve_indicator_model(src), ConfigError);
  src.k1 = 20;
  EXPECT_EQ(resolve_indicator_model(src).size(), 20U);
}

// ---------------------------------------------------------------------------
// Seeds and statistics
// ---------------------------------------------------------------------------

TEST(Seeds, DistinctAcrossRunsAndStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t run = 0; run < 200; ++run) {
    for (std::uint64_t stream = 0; stream < 3; ++stream) seen.insert(derive_seed(2025, run, stream));
  }
  EXPECT_EQ(seen.size(), 600U);
  EXPECT_NE(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
  EXPECT_EQ(derive_seed(7, 3, 1), derive_seed(7, 3, 1));
}

TEST(Statistics, QuantileInterpolatesLinearly) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_DOUBLE_EQ(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.25), 2.0);
  EXPECT_DOUBLE_EQ(quantile({0.0, 10.0}, 0.75), 7.5);
  EXPECT_TRUE(std::isnan(median({})));
}

TEST(Statistics, MeanSquaredErrorPerComponent) {
  std::vector<Vector> est{Vector::Zero(2), Vector::Ones(2)};
  Vector a(2), b(2);
  a << 1.0, 2.0;
  b << 1.0, -1.0;
  std::vector<Vector> truth{a, b};
  const auto mse = mean_squared_error(est, truth);
  EXPECT_DOUBLE_EQ(mse[0], 0.5);
  EXPECT_DOUBLE_EQ(mse[1], 4.0);
}

TEST(Statistics, TotalVariation) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_DOUBLE_EQ(total_variation(p, p), 0.0);
  EXPECT_DOUBLE_EQ(total_variation(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_NEAR(total_variation(p, std::vector<double>{0.3, 0.3, 0.4}), 0.1, 1e-15);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

TEST(RunFilter, NoiseFreeGsfTracksExactly) {
  auto c = config_from_json(small_config("siso"));
  c.scenario.model.Q(0, 0) = 1e-12;
  c.scenario.model.R(0, 0) = 0.0;
  c.scenario.model.P1(0, 0) = 1e-12;
  const auto& sc = c.scenario;
  const auto traj = simulate(sc.model, sc.quantizer, sc.inputs, 50, 3);
  const auto tmpl = make_indicator_template(base_model(), 1, c.gsf);
  const auto rec = run_filter(FilterKind::Gsf, c, traj, tmpl, 0);
  ASSERT_TRUE(rec.ok) << rec.error;
  EXPECT_LT(rec.mse[0], 1e-6);
  EXPECT_EQ(rec.estimates.size(), 50U);
}

TEST(RunFilter, FailureIsRecordedNotThrown) {
  auto c = config_from_json(small_config("siso"));
  const auto& sc = c.scenario;
  auto traj = simulate(sc.model, sc.quantizer, sc.inputs, 10, 3);
  traj.y[4](0) = 1e300;  // impossible cell for every particle
  const auto rec = run_filter(FilterKind::Pf, c, traj, nullptr, 2);
  EXPECT_FALSE(rec.ok);
  EXPECT_FALSE(rec.error.empty());
  EXPECT_EQ(rec.run, 2U);
}

class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new ExperimentConfig(config_from_json(small_config("siso")));
    summary_ = new MCSummary(run_experiment(*config_, base_model()));
    summary_->pdfs = compare_pdfs(*config_, base_model(), config_->pdf_steps);
    dir_ = new fs::path(scratch("experiment"));
    emit_outputs(*summary_, *dir_);
  }
  static void TearDownTestSuite() {
    delete config_;
    delete summary_;
    delete dir_;
  }
  static ExperimentConfig* config_;
  static MCSummary* summary_;
  static fs::path* dir_;
};

ExperimentConfig* ExperimentTest::config_ = nullptr;
MCSummary* ExperimentTest::summary_ = nullptr;
fs::path* ExperimentTest::dir_ = nullptr;

TEST_F(ExperimentTest, RecordsCoverEveryRunAndFilter) {
  ASSERT_EQ(summary_->records.size(), 16U);
  for (std::size_t i = 0; i < summary_->records.size(); ++i) {
    const auto& r = summary_->records[i];
    EXPECT_EQ(r.run, i / 4);
    EXPECT_EQ(r.filter, config_->filters[i % 4]);
    EXPECT_TRUE(r.ok) << r.error;
    EXPECT_EQ(r.estimates.size(), 20U);
    EXPECT_GE(r.seconds, 0.0);
  }
  EXPECT_FALSE(summary_->degenerate_only());
}

TEST_F(ExperimentTest, MseMatchesTruthTrajectories) {
  for (const auto& r : summary_->records) {
    const auto mse = mean_squared_error(r.estimates, summary_->truth[r.run]);
    EXPECT_EQ(mse, r.mse);
    for (double v : r.mse) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST_F(ExperimentTest, CsvShapes) {
  const auto mse = read_csv(*dir_ / "mse.csv");
  ASSERT_FALSE(mse.empty());
  EXPECT_EQ(mse[0], (std::vector<std::string>{"run", "filter", "state_component", "mse"}));
  EXPECT_EQ(mse.size(), 1U + 16U);
  const auto timing = read_csv(*dir_ / "timing.csv");
  EXPECT_EQ(timing.size(), 1U + 16U);
  const auto env = read_csv(*dir_ / "envelope.csv");
  EXPECT_EQ(env[0], (std::vector<std::string>{"t", "filter", "state_component", "min", "mean", "max", "truth"}));
  EXPECT_EQ(env.size(), 1U + 20U * 4U);
  const auto pdfs = read_csv(*dir_ / "pdfs.csv");
  EXPECT_EQ(pdfs[0], (std::vector<std::string>{"step", "grid_x", "gsf_density", "gt_density"}));
  EXPECT_EQ(pdfs.size(), 1U + 2U * 100U);
}

TEST_F(ExperimentTest, EnvelopeContainsMean) {
  const auto env = read_csv(*dir_ / "envelope.csv");
  for (std::size_t i = 1; i < env.size(); ++i) {
    const double lo = std::stod(env[i][3]), mean = std::stod(env[i][4]), hi = std::stod(env[i][5]);
    EXPECT_LE(lo, mean + 1e-12);
    EXPECT_LE(mean, hi + 1e-12);
  }
}

TEST_F(ExperimentTest, SummaryMediansMatchMseCsv) {
  const auto rows = read_csv(*dir_ / "mse.csv");
  std::map<std::string, std::vector<double>> by_filter;
  for (std::size_t i = 1; i < rows.size(); ++i) by_filter[rows[i][1]].push_back(std::stod(rows[i][3]));
  const auto s = json::parse(slurp(*dir_ / "summary.json"));
  for (const auto& [name, values] : by_filter) {
    EXPECT_NEAR(s["filters"][name]["mse_median"][0].get<double>(), median(values), 1e-12) << name;
    EXPECT_EQ(s["filters"][name]["successful_runs"].get<int>(), 4);
  }
  EXPECT_EQ(s["runs"].get<int>(), 4);
  EXPECT_EQ(s["pdf_comparisons"].size(), 2U);
  EXPECT_FALSE(s["degenerate_only"].get<bool>());
}

TEST_F(ExperimentTest, PdfRecordsAreProperDensities) {
  ASSERT_EQ(summary_->pdfs.size(), 2U);
  for (const auto& p : summary_->pdfs) {
    ASSERT_GE(p.grid_x.size(), 2U);
    const double h = p.grid_x[1] - p.grid_x[0];
    double gt = 0.0;
    for (double d : p.gt_density) gt += d * h;
    EXPECT_LE(gt, 1.0 + 1e-9);
    EXPECT_GT(gt, 0.99);
    EXPECT_GE(p.tv_gsf, 0.0);
    EXPECT_LE(p.tv_gsf, 1.0);
    EXPECT_LE(p.tv_qkf, 1.0);
  }
}

TEST_F(ExperimentTest, RerunIsByteIdentical) {
  auto again = run_experiment(*config_, base_model());
  again.pdfs = compare_pdfs(*config_, base_model(), config_->pdf_steps);
  const auto dir = scratch("experiment_again");
  emit_outputs(again, dir);
  EXPECT_EQ(slurp(dir / "mse.csv"), slurp(*dir_ / "mse.csv"));
  EXPECT_EQ(slurp(dir / "envelope.csv"), slurp(*dir_ / "envelope.csv"));
  EXPECT_EQ(slurp(dir / "pdfs.csv"), slurp(*dir_ / "pdfs.csv"));
}

TEST_F(ExperimentTest, ThreadCountDoesNotChangeResults) {
  auto c = *config_;
  c.threads = 1;
  const auto serial = run_experiment(c, base_model());
  ASSERT_EQ(serial.records.size(), summary_->records.size());
  for (std::size_t i = 0; i < serial.records.size(); ++i) EXPECT_EQ(serial.records[i].mse, summary_->records[i].mse);
}

TEST(Experiment, TwoStatePdfsUseTwoGridColumns) {
  auto j = small_config("mimo");
  j["runs"] = 1;
  j["horizon"] = 5;
  j["filters"] = {"gsf", "qkf"};
  j["pdf"] = {{"steps", {3}}, {"bins", 10}};
  const auto c = config_from_json(j);
  auto s = run_experiment(c, base_model());
  s.pdfs = compare_pdfs(c, base_model(), c.pdf_steps);
  const auto dir = scratch("mimo");
  emit_outputs(s, dir);
  const auto pdfs = read_csv(dir / "pdfs.csv");
  EXPECT_EQ(pdfs[0], (std::vector<std::string>{"step", "grid_x", "grid_y", "gsf_density", "gt_density"}));
  EXPECT_EQ(pdfs.size(), 1U + 100U);
  EXPECT_EQ(read_csv(dir / "envelope.csv").size(), 1U + 5U * 2U * 2U);
}

TEST(Experiment, EmptySummaryWritesHeaders) {
  MCSummary s;
  const auto dir = scratch("empty");
  emit_outputs(s, dir);
  EXPECT_EQ(slurp(dir / "mse.csv"), "run,filter,state_component,mse\n");
  EXPECT_EQ(slurp(dir / "timing.csv"), "run,filter,seconds\n");
  EXPECT_EQ(slurp(dir / "envelope.csv"), "t,filter,state_component,min,mean,max,truth\n");
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
}

TEST(Experiment, DegenerateOnlyWhenAFilterFailsEveryRun) {
  MCSummary s;
  s.filters = {FilterKind::Gsf, FilterKind::Pf};
  s.records = {{0, FilterKind::Gsf, true, "", {}, 0.0, {}},
               {0, FilterKind::Pf, false, "x", {}, 0.0, {}},
               {1, FilterKind::Gsf, false, "x", {}, 0.0, {}},
               {1, FilterKind::Pf, true, "", {}, 0.0, {}}};
  EXPECT_FALSE(s.degenerate_only());
  s.records[3].ok = false;
  EXPECT_TRUE(s.degenerate_only());
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  auto j = small_config("siso");
  j["runs"] = 2;
  j["output_dir"] = (dir / "out").string();
  std::ofstream(dir / "ok.json") << j.dump();
  std::ofstream(dir / "bad.json") << json{{"runz", 2}}.dump();

  EXPECT_EQ(run_cli("run -c " + (dir / "ok.json").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "summary.json"));
  EXPECT_EQ(run_cli("report " + (dir / "out" / "summary.json").string()), 0);
  EXPECT_EQ(run_cli("run -c " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("run"), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("simulate --scenario mimo -T 7 -o " + (dir / "traj.csv").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "traj.csv"));
}
