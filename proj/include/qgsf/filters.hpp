#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qgsf/gaussian_mixture.hpp"
#include "qgsf/indicator.hpp"
#include "qgsf/system_model.hpp"

namespace qgsf {

/// A measurement update whose likelihood vanished for every hypothesis.
class DegenerateUpdate : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GridTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Estimate {
  Vector mean;
  Matrix covariance;
};

// ---------------------------------------------------------------------------
// Gaussian sum filter
// ---------------------------------------------------------------------------

/// Measurement update of a Gaussian-mixture prior against a Gaussian-mixture
/// approximation of the cell indicator. Component l = k*K + j pairs prior
/// component k with indicator component j. cap == 0 disables reduction.
GaussianMixture gsf_correct(const GaussianMixture& prior, const Vector& u, const StateSpaceModel& model,
                            const IndicatorGmm& indicator, std::size_t cap);

/// Time update; weights are unchanged and every component goes through the dynamics.
GaussianMixture gsf_predict(const GaussianMixture& posterior, const Vector& u, const StateSpaceModel& model);

Estimate gsf_estimate(const GaussianMixture& mixture);

struct GsfConfig {
  std::size_t reduction_cap = 20;
  double alpha = 0.0;
  /// Pre-reduction of the K1^p indicator set for p >= 2; 0 keeps every component.
  std::size_t indicator_components = 50;
};

struct GsfState {
  GaussianMixture mixture;  // predictive density of the next state
  std::shared_ptr<const IndicatorTemplate> indicator;
  GsfConfig config;
  std::size_t t = 0;
  std::size_t skipped_updates = 0;
  Estimate filtered;
};

GsfState gsf_init(const StateSpaceModel& model, std::shared_ptr<const IndicatorTemplate> indicator,
                  const GsfConfig& config);

/// Builds the indicator template a GSF with this config uses for model.p() outputs.
std::shared_ptr<const IndicatorTemplate> make_indicator_template(const UnitIntervalGmm& base, int p,
                                                                 const GsfConfig& config);

/// Corrects with (y, u), stores the filtered estimate, then predicts with u.
/// A degenerate correction keeps the prior and increments skipped_updates.
GsfState gsf_step(GsfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q);

// ---------------------------------------------------------------------------
// Bootstrap particle filter
// ---------------------------------------------------------------------------

struct PfState {
  Matrix particles;  // n x N, columns are particles
  std::vector<double> log_weights;
  double resample_threshold = 0.5;  // fraction of N
  std::mt19937_64 rng;
  std::size_t t = 0;
  std::size_t resample_count = 0;
  Estimate filtered;

  std::size_t size() const { return static_cast<std::size_t>(particles.cols()); }
  std::vector<double> normalized_weights() const;
};

PfState pf_init(const StateSpaceModel& model, std::size_t n_particles, std::uint64_t seed,
                double resample_threshold = 0.5);

/// Reweights by the exact cell probability and normalizes; sets filtered.
PfState pf_correct(PfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                   const UniformQuantizer& q);
/// Systematic resampling when ESS < threshold * N, then propagation through the dynamics.
PfState pf_predict(PfState state, const Vector& u, const StateSpaceModel& model);
PfState pf_step(PfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                const UniformQuantizer& q);

double effective_sample_size(const std::vector<double>& normalized_weights);
/// Systematic resampling indices for an offset in [0, 1).
std::vector<std::size_t> systematic_resample(const std::vector<double>& normalized_weights, double offset);

// ---------------------------------------------------------------------------
// Unscented Kalman filter through the quantizer
// ---------------------------------------------------------------------------

struct UkfParams {
  double alpha = 1.0;
  double beta = 2.0;
  /// Defaults to 3 - n when unset.
  std::optional<double> kappa;
};

struct UkfState {
  Vector mean;  // predictive
  Matrix covariance;
  UkfParams params;
  std::size_t t = 0;
  Estimate filtered;
};

struct SigmaPoints {
  Matrix points;  // n x (2n+1)
  std::vector<double> mean_weights;
  std::vector<double> cov_weights;
};

SigmaPoints sigma_points(const Vector& mean, const Matrix& covariance, const UkfParams& params);

UkfState ukf_init(const StateSpaceModel& model, const UkfParams& params = {});
UkfState ukf_correct(UkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                     const UniformQuantizer& q);
UkfState ukf_predict(UkfState state, const Vector& u, const StateSpaceModel& model);
UkfState ukf_step(UkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q);

// ---------------------------------------------------------------------------
// Quantized Kalman filter (uniform quantization-noise model)
// ---------------------------------------------------------------------------

struct QkfState {
  Vector mean;  // predictive
  Matrix covariance;
  std::size_t t = 0;
  Estimate filtered;
};

/// R + diag(step^2 / 12)
Matrix qkf_measurement_covariance(const StateSpaceModel& model, const UniformQuantizer& q);

QkfState qkf_init(const StateSpaceModel& model);
QkfState qkf_correct(QkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                     const UniformQuantizer& q);
QkfState qkf_predict(QkfState state, const Vector& u, const StateSpaceModel& model);
QkfState qkf_step(QkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q);

/// Plain Kalman filter step with a continuous measurement z (reference for limit checks).
QkfState kalman_step(QkfState state, const Vector& z, const Vector& u, const StateSpaceModel& model,
                     const Matrix& measurement_covariance);

// ---------------------------------------------------------------------------
// Point-mass grid filter (n <= 2), used as an exact-likelihood oracle
// ---------------------------------------------------------------------------

struct GridAxis {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t points = 0;

  double spacing() const { return (upper - lower) / static_cast<double>(points - 1); }
  double at(std::size_t i) const { return lower + spacing() * static_cast<double>(i); }
};

struct GridFilter {
  std::vector<GridAxis> axes;
  std::vector<double> masses;  // predictive; row-major, last axis fastest
  std::size_t t = 0;
  Estimate filtered;

  std::size_t size() const { return masses.size(); }
  Vector point(std::size_t index) const;
};

/// Axes covering mean +- width_sigmas * std of both the stationary state
/// distribution under the input process and the initial distribution.
std::vector<GridAxis> grid_axes_for(const StateSpaceModel& model, const InputSpec& inputs, std::size_t points,
                                    double width_sigmas = 10.0);

GridFilter grid_init(const StateSpaceModel& model, std::vector<GridAxis> axes);
GridFilter grid_correct(GridFilter state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                        const UniformQuantizer& q);
GridFilter grid_predict(GridFilter state, const Vector& u, const StateSpaceModel& model);
GridFilter grid_filter_step(GridFilter state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                            const UniformQuantizer& q);

}  // namespace qgsf
