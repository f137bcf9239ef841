#include <algorithm>
#include <cmath>
#include <limits>

#include "qgsf/filters.hpp"

namespace qgsf {

namespace {

Estimate weighted_moments(const Matrix& particles, const std::vector<double>& w) {
  const auto n = particles.rows();
  Vector mean = Vector::Zero(n);
  for (Eigen::Index i = 0; i < particles.cols(); ++i) mean += w[static_cast<std::size_t>(i)] * particles.col(i);
  Matrix cov = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < particles.cols(); ++i) {
    const Vector d = particles.col(i) - mean;
    cov += w[static_cast<std::size_t>(i)] * d * d.transpose();
  }
  return {mean, symmetrize(cov)};
}

void fill_standard_normal(Matrix& out, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = normal(rng);
  }
}

}  // namespace

std::vector<double> PfState::normalized_weights() const {
  const double log_norm = log_sum_exp(log_weights);
  std::vector<double> w(log_weights.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_weights[i] - log_norm);
  return w;
}

double effective_sample_size(const std::vector<double>& normalized_weights) {
  double sum_sq = 0.0;
  for (double w : normalized_weights) sum_sq += w * w;
  return 1.0 / sum_sq;
}

std::vector<std::size_t> systematic_resample(const std::vector<double>& normalized_weights, double offset) {
  const std::size_t n = normalized_weights.size();
  std::vector<std::size_t> index(n);
  double cumulative = normalized_weights.empty() ? 0.0 : normalized_weights[0];
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = (static_cast<double>(i) + offset) / static_cast<double>(n);
    while (target > cumulative && src + 1 < n) cumulative += normalized_weights[++src];
    index[i] = src;
  }
  return index;
}

PfState pf_init(const StateSpaceModel& model, std::size_t n_particles, std::uint64_t seed,
                double resample_threshold) {
  model.validate();
  if (n_particles < 1) throw ContractViolation("pf_init: need at least one particle");
  PfState state;
  state.rng.seed(seed);
  state.resample_threshold = resample_threshold;
  state.particles.resize(model.n(), static_cast<Eigen::Index>(n_particles));
  fill_standard_normal(state.particles, state.rng);
  state.particles = (psd_factor(model.P1) * state.particles).colwise() + model.mu1;
  state.log_weights.assign(n_particles, -std::log(static_cast<double>(n_particles)));
  return state;
}

PfState pf_correct(PfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                   const UniformQuantizer& q) {
  const Matrix& r = model.R;
  for (int i = 0; i < r.rows(); ++i) {
    for (int j = 0; j < r.cols(); ++j) {
      if (i != j && r(i, j) != 0.0) {
        throw UnsupportedConfiguration("particle filter likelihood needs a diagonal R");
      }
    }
  }
  const auto bounds = region_bounds(y, q);
  const Matrix outputs = (model.C * state.particles).colwise() + model.D * u;
  Vector inv_sigma(r.rows());
  for (int j = 0; j < r.rows(); ++j) inv_sigma(j) = 1.0 / std::sqrt(r(j, j));

  for (Eigen::Index i = 0; i < outputs.cols(); ++i) {
    double loglik = 0.0;
    for (Eigen::Index j = 0; j < outputs.rows(); ++j) {
      const double c = outputs(j, i);
      loglik += log_normal_interval((bounds[static_cast<std::size_t>(j)].first - c) * inv_sigma(j),
                                    (bounds[static_cast<std::size_t>(j)].second - c) * inv_sigma(j));
    }
    state.log_weights[static_cast<std::size_t>(i)] += loglik;
  }
  const double max_lw = *std::max_element(state.log_weights.begin(), state.log_weights.end());
  if (!std::isfinite(max_lw)) {
    throw DegenerateUpdate("particle filter: every particle has zero likelihood");
  }
  // shift first: far-tail log weights are large enough that subtracting log_norm directly loses digits
  for (double& lw : state.log_weights) lw -= max_lw;
  const double log_norm = log_sum_exp(state.log_weights);
  for (double& lw : state.log_weights) lw -= log_norm;
  state.filtered = weighted_moments(state.particles, state.normalized_weights());
  return state;
}

PfState pf_predict(PfState state, const Vector& u, const StateSpaceModel& model) {
  const std::size_t n = state.size();
  const auto w = state.normalized_weights();
  if (effective_sample_size(w) < state.resample_threshold * static_cast<double>(n)) {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const auto index = systematic_resample(w, uniform(state.rng));
    Matrix resampled(state.particles.rows(), state.particles.cols());
    for (std::size_t i = 0; i < n; ++i) {
      resampled.col(static_cast<Eigen::Index>(i)) = state.particles.col(static_cast<Eigen::Index>(index[i]));
    }
    state.particles = std::move(resampled);
    state.log_weights.assign(n, -std::log(static_cast<double>(n)));
    ++state.resample_count;
  }
  Matrix noise(state.particles.rows(), state.particles.cols());
  fill_standard_normal(noise, state.rng);
  state.particles = ((model.A * state.particles + psd_factor(model.Q) * noise).colwise() + model.B * u).eval();
  ++state.t;
  return state;
}

PfState pf_step(PfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                const UniformQuantizer& q) {
  return pf_predict(pf_correct(std::move(state), y, u, model, q), u, model);
}

}  // namespace qgsf
