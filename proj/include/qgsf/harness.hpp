#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qgsf/filters.hpp"
#include "qgsf/indicator.hpp"
#include "qgsf/system_model.hpp"

namespace qgsf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FilterKind { Gsf, Pf, Ukf, Qkf };

std::string filter_name(FilterKind kind);
FilterKind parse_filter(const std::string& name);

struct IndicatorSource {
  std::optional<std::filesystem::path> model_path;  // trained offline; preferred when set
  int k1 = 20;
  std::size_t train_samples = 1'000'000;
  std::uint64_t train_seed = 1;
  EmConfig em;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string scenario_name = "siso";  // "siso", "mimo" or "custom"
  Scenario scenario = scenario_siso();
  std::vector<FilterKind> filters{FilterKind::Gsf, FilterKind::Pf, FilterKind::Ukf, FilterKind::Qkf};

  std::size_t horizon = 100;
  std::size_t runs = 100;
  std::uint64_t seed = 2025;

  GsfConfig gsf;
  IndicatorSource indicator;
  std::size_t particles = 300;
  double resample_threshold = 0.5;
  std::size_t gt_particles = 20'000;
  UkfParams ukf;

  std::vector<std::size_t> pdf_steps{10, 25, 50};
  std::size_t pdf_bins = 0;  // per axis; 0 picks 100 for one state and 30 for two

  std::size_t threads = 0;  // 0 = hardware concurrency
  std::filesystem::path output_dir = "out";

  void validate() const;
  std::size_t bins_per_axis() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Seed for substream `stream` of run `run`; distinct streams never share state.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t run, std::uint64_t stream);

namespace streams {
inline constexpr std::uint64_t kTrajectory = 0;
inline constexpr std::uint64_t kParticle = 1;
inline constexpr std::uint64_t kGroundTruth = 2;
}  // namespace streams

/// Loads the configured model file, or trains one when no path is given.
UnitIntervalGmm resolve_indicator_model(const IndicatorSource& source);

struct RunRecord {
  std::size_t run = 0;
  FilterKind filter = FilterKind::Gsf;
  bool ok = true;
  std::string error;
  std::vector<double> mse;  // per state component
  double seconds = 0.0;
  std::vector<Vector> estimates;  // filtered means, one per step
};

struct PdfRecord {
  std::size_t step = 0;
  std::vector<double> grid_x;
  std::vector<double> grid_y;  // empty for a scalar state
  std::vector<double> gsf_density;
  std::vector<double> gt_density;
  std::vector<double> qkf_density;
  double tv_gsf = 0.0;
  double tv_qkf = 0.0;
};

struct MCSummary {
  nlohmann::json config;
  std::vector<FilterKind> filters;
  int state_dim = 0;
  std::size_t horizon = 0;
  std::vector<RunRecord> records;                // ordered by (run, filter order)
  std::vector<std::vector<Vector>> truth;        // per run, per step
  std::vector<PdfRecord> pdfs;

  /// True when some selected filter failed on every run.
  bool degenerate_only() const;
};

/// Mean-squared error per component between estimates and truth.
std::vector<double> mean_squared_error(std::span<const Vector> estimates, std::span<const Vector> truth);

/// Runs one filter over a trajectory; timing covers the filter loop only.
RunRecord run_filter(FilterKind kind, const ExperimentConfig& config, const Trajectory& traj,
                     std::shared_ptr<const IndicatorTemplate> indicator, std::size_t run);

MCSummary run_experiment(const ExperimentConfig& config, const UnitIntervalGmm& base);

/// 0.5 * sum |p - q| over cell probabilities.
double total_variation(std::span<const double> p, std::span<const double> q);

/// GSF and QKF posteriors against a large particle filter on the run-0 trajectory.
std::vector<PdfRecord> compare_pdfs(const ExperimentConfig& config, const UnitIntervalGmm& base,
                                    std::span<const std::size_t> steps);

nlohmann::json summarize(const MCSummary& summary);

/// mse.csv, timing.csv, envelope.csv, pdfs.csv, summary.json
void emit_outputs(const MCSummary& summary, const std::filesystem::path& dir);

double median(std::vector<double> values);
double quantile(std::vector<double> values, double q);

}  // namespace qgsf
