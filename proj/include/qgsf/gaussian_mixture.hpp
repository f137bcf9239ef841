#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qgsf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Thrown when a covariance that must be SPD has no Cholesky factor.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a caller breaks a documented precondition.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GaussianComponent {
  double weight = 0.0;
  Vector mean;
  Matrix covariance;

  int dim() const { return static_cast<int>(mean.size()); }
};

/// Weighted list of Gaussian components sharing one dimension.
///
/// A normalized mixture is a probability density (weights sum to one). An
/// unnormalized mixture is used for likelihood terms such as the indicator
/// approximation, whose total mass is the volume of the region.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<GaussianComponent> components, bool normalized);

  static GaussianMixture single(const Vector& mean, const Matrix& covariance);

  const std::vector<GaussianComponent>& components() const { return components_; }
  const GaussianComponent& operator[](std::size_t i) const { return components_[i]; }
  std::size_t size() const { return components_.size(); }
  int dim() const { return components_.front().dim(); }
  bool normalized() const { return normalized_; }
  double total_weight() const;

  /// Density (or unnormalized density) at x.
  double evaluate(const Vector& x) const;
  double log_evaluate(const Vector& x) const;

 private:
  std::vector<GaussianComponent> components_;
  bool normalized_;
};

struct Moments {
  Vector mean;
  Matrix covariance;
};

/// Numerically stable log(sum(exp(values))). Returns -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> values);

/// (M + M^T) / 2
Matrix symmetrize(const Matrix& m);

/// log N(x; mean, covariance) via a Cholesky factor.
double gaussian_logpdf(const Vector& x, const Vector& mean, const Matrix& covariance);

/// Mean and covariance of a normalized mixture.
Moments mixture_moments(const GaussianMixture& m);

/// n i.i.d. draws: a component is picked by weight, then a Gaussian draw is made.
std::vector<Vector> mixture_sample(const GaussianMixture& m, std::size_t n, std::uint64_t seed);

/// Replaces two components by one with the same zeroth, first and second moments.
GaussianComponent merge_moment_preserving(const GaussianComponent& a, const GaussianComponent& b);

/// Runnalls' upper bound on the KL discrimination caused by merging a and b.
double runnalls_dissimilarity(const GaussianComponent& a, const GaussianComponent& b);

/// Greedy KL-bound reduction to at most `target` components. Mixtures at or
/// under the target are returned unchanged.
GaussianMixture reduce_runnalls(const GaussianMixture& m, std::size_t target);

}  // namespace qgsf
