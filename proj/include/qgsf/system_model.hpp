#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qgsf/gaussian_mixture.hpp"

namespace qgsf {

class UnsupportedConfiguration : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// x_{t+1} = A x_t + B u_t + w_t,  z_t = C x_t + D u_t + v_t,  w ~ N(0,Q), v ~ N(0,R),
/// x_1 ~ N(mu1, P1).
struct StateSpaceModel {
  Matrix A, B, C, D;
  Matrix Q, R;
  Vector mu1;
  Matrix P1;

  int n() const { return static_cast<int>(A.rows()); }
  int m() const { return static_cast<int>(B.cols()); }
  int p() const { return static_cast<int>(C.rows()); }

  /// Checks dimensions and that Q, R, P1 are symmetric positive semidefinite.
  /// Zero covariances are accepted so that noise-free systems can be simulated.
  void validate() const;
};

class UniformQuantizer {
 public:
  explicit UniformQuantizer(Vector step);
  static UniformQuantizer uniform(int p, double step) { return UniformQuantizer(Vector::Constant(p, step)); }

  const Vector& step() const { return step_; }
  int dim() const { return static_cast<int>(step_.size()); }

 private:
  Vector step_;
};

/// Gaussian input process u_t ~ N(mean, covariance), i.i.d. over time.
struct InputSpec {
  Vector mean;
  Matrix covariance;
};

struct Trajectory {
  std::vector<Vector> x, z, y, u;
  std::uint64_t seed = 0;

  std::size_t length() const { return x.size(); }
};

/// A model, its quantizer and input process.
struct Scenario {
  StateSpaceModel model;
  UniformQuantizer quantizer;
  InputSpec inputs;
};

/// Scalar system: A=0.8, B=1.5, C=2.8, D=1.8, Q=1, R=0.1, step 10.
Scenario scenario_siso();
/// Two-state, two-output system with step 7.
Scenario scenario_mimo();

/// y_j = step_j * floor(z_j / step_j + 1/2); ties go to the upper cell.
Vector quantize(const Vector& z, const UniformQuantizer& q);

/// Cell [a_j, b_j) per axis; throws ContractViolation when y is off the lattice.
std::vector<std::pair<double, double>> region_bounds(const Vector& y, const UniformQuantizer& q);

Trajectory simulate(const StateSpaceModel& model, const UniformQuantizer& q, const std::vector<Vector>& inputs,
                    std::uint64_t seed);
Trajectory simulate(const StateSpaceModel& model, const UniformQuantizer& q, const InputSpec& inputs,
                    std::size_t horizon, std::uint64_t seed);

/// log Phi(x), accurate deep into the lower tail.
double log_normal_cdf(double x);
/// log(Phi(hi) - Phi(lo)) for standardized bounds, hi > lo; either may be infinite.
double log_normal_interval(double lo, double hi);

/// log P(y | x, u) computed from the Gaussian CDF. Requires diagonal R.
double exact_region_loglik(const Vector& y, const Vector& x, const Vector& u, const StateSpaceModel& model,
                           const UniformQuantizer& q);

/// Square-root factor L with L L^T = cov; tolerates singular PSD input.
Matrix psd_factor(const Matrix& cov);

void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path);
/// Dimensions are taken from the header.
Trajectory read_trajectory_csv(const std::filesystem::path& path);

}  // namespace qgsf
