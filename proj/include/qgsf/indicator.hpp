#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qgsf/gaussian_mixture.hpp"

namespace qgsf {

class UniformQuantizer;

struct EmConfig {
  int max_iter = 500;
  double tol = 1e-7;  // per-sample log-likelihood improvement
};

/// Univariate GMM fitted to the uniform density on [0, 1].
struct UnitIntervalGmm {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> variances;

  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  int em_iterations = 0;
  double final_loglik = 0.0;  // per-sample
  int collapse_resets = 0;
  std::vector<double> loglik_trace;  // per-sample log-likelihood at each E-step; not persisted

  std::size_t size() const { return weights.size(); }
  double density(double x) const;
  void validate() const;
};

/// Standard EM for a univariate GMM, initialized deterministically at sample quantiles.
UnitIntervalGmm em_fit_unit(std::span<const double> samples, int k1, const EmConfig& config,
                            std::uint64_t seed);

/// Draws n_samples uniform points on [0, 1] and fits K1 components.
UnitIntervalGmm train_unit_gmm(std::size_t n_samples, int k1, std::uint64_t seed,
                               const EmConfig& config = {});

/// 1-D unnormalized mixture approximating the indicator of [a, b).
GaussianMixture scale_to_interval(const UnitIntervalGmm& g, double a, double b);

/// Unnormalized mixture approximating the indicator of a hyperrectangle.
struct IndicatorGmm {
  GaussianMixture mixture;
  std::vector<std::pair<double, double>> bounds;
  double alpha = 0.0;
};

/// Cartesian product of p one-dimensional mixtures; diagonal covariances.
IndicatorGmm tensor_product(std::span<const GaussianMixture> per_dim);

/// Adds alpha to every diagonal variance entry.
IndicatorGmm regularize(const IndicatorGmm& g, double alpha);

/// Indicator approximation for the quantizer cell that produced y.
IndicatorGmm indicator_for_output(const Vector& y, const UniformQuantizer& q,
                                  const UnitIntervalGmm& base, double alpha);

/// Precomputed tensor product on the unit cube [0,1]^p, optionally pre-reduced,
/// that is placed onto a quantizer cell by an affine map.
///
/// Moment-preserving merges and the Runnalls cost commute with per-axis affine
/// scaling, so reducing once on the unit cube gives the same component set as
/// reducing each placed cell, up to how exact cost ties are broken.
class IndicatorTemplate {
 public:
  /// reduce_to == 0 keeps all K1^p components.
  IndicatorTemplate(const UnitIntervalGmm& base, int p, std::size_t reduce_to = 0);

  int dim() const { return dim_; }
  std::size_t size() const { return unit_.size(); }
  const GaussianMixture& unit_cube() const { return unit_; }

  IndicatorGmm place(std::span<const std::pair<double, double>> bounds, double alpha) const;
  IndicatorGmm for_output(const Vector& y, const UniformQuantizer& q, double alpha) const;

 private:
  int dim_;
  GaussianMixture unit_;
};

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_model(const UnitIntervalGmm& g, const std::filesystem::path& path);
UnitIntervalGmm load_model(const std::filesystem::path& path);

}  // namespace qgsf
