#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "qgsf/filters.hpp"

namespace qgsf {

namespace {

constexpr double kKernelSigmas = 8.0;
constexpr double kEdgeMassLimit = 1e-6;
constexpr double kNegligibleSource = 1e-18;  // relative to the largest mass

std::size_t flat_index(const std::vector<std::size_t>& idx, const std::vector<GridAxis>& axes) {
  std::size_t flat = 0;
  for (std::size_t d = 0; d < axes.size(); ++d) flat = flat * axes[d].points + idx[d];
  return flat;
}

std::vector<std::size_t> unflatten(std::size_t flat, const std::vector<GridAxis>& axes) {
  std::vector<std::size_t> idx(axes.size());
  for (std::size_t d = axes.size(); d-- > 0;) {
    idx[d] = flat % axes[d].points;
    flat /= axes[d].points;
  }
  return idx;
}

// Multi-linear deposit of `mass` at point x; mass outside the grid is dropped.
void deposit(std::vector<double>& masses, const std::vector<GridAxis>& axes, const Vector& x, double mass) {
  const std::size_t dims = axes.size();
  std::vector<std::size_t> base(dims);
  std::vector<double> frac(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    const double s = (x(static_cast<Eigen::Index>(d)) - axes[d].lower) / axes[d].spacing();
    if (s < 0.0 || s > static_cast<double>(axes[d].points - 1)) return;
    const auto b = std::min(static_cast<std::size_t>(s), axes[d].points - 2);
    base[d] = b;
    frac[d] = s - static_cast<double>(b);
  }
  for (std::size_t corner = 0; corner < (std::size_t{1} << dims); ++corner) {
    std::vector<std::size_t> idx(base);
    double w = mass;
    for (std::size_t d = 0; d < dims; ++d) {
      const bool upper = (corner >> d) & 1U;
      idx[d] += upper ? 1 : 0;
      w *= upper ? frac[d] : 1.0 - frac[d];
    }
    if (w != 0.0) masses[flat_index(idx, axes)] += w;
  }
}

void normalize(std::vector<double>& masses) {
  double total = 0.0;
  for (double m : masses) total += m;
  for (double& m : masses) m /= total;
}

void check_edges(const GridFilter& g) {
  double lost = 1.0;
  for (double m : g.masses) lost -= m;
  double edge = 0.0;
  for (std::size_t flat = 0; flat < g.size(); ++flat) {
    if (g.masses[flat] == 0.0) continue;
    const auto idx = unflatten(flat, g.axes);
    for (std::size_t d = 0; d < g.axes.size(); ++d) {
      const std::size_t band = std::max<std::size_t>(1, g.axes[d].points / 100);
      if (idx[d] < band || idx[d] >= g.axes[d].points - band) {
        edge += g.masses[flat];
        break;
      }
    }
  }
  if (edge > kEdgeMassLimit || lost > kEdgeMassLimit) {
    throw GridTooSmall(fmt::format("grid filter: {:.3g} of the mass is at the grid edge and {:.3g} fell off",
                                   edge, std::max(lost, 0.0)));
  }
}

Estimate grid_moments(const GridFilter& g) {
  const auto n = static_cast<Eigen::Index>(g.axes.size());
  Vector mean = Vector::Zero(n);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.masses[i] != 0.0) mean += g.masses[i] * g.point(i);
  }
  Matrix cov = Matrix::Zero(n, n);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.masses[i] == 0.0) continue;
    const Vector d = g.point(i) - mean;
    cov += g.masses[i] * d * d.transpose();
  }
  return {mean, symmetrize(cov)};
}

Matrix stationary_covariance(const Matrix& A, const Matrix& drive) {
  Matrix p = drive;
  for (int it = 0; it < 100000; ++it) {
    const Matrix next = A * p * A.transpose() + drive;
    const double change = (next - p).cwiseAbs().maxCoeff();
    p = next;
    if (change <= 1e-13 * std::max(1.0, p.cwiseAbs().maxCoeff())) break;
  }
  return p;
}

}  // namespace

Vector GridFilter::point(std::size_t index) const {
  const auto idx = unflatten(index, axes);
  Vector x(static_cast<Eigen::Index>(axes.size()));
  for (std::size_t d = 0; d < axes.size(); ++d) x(static_cast<Eigen::Index>(d)) = axes[d].at(idx[d]);
  return x;
}

std::vector<GridAxis> grid_axes_for(const StateSpaceModel& model, const InputSpec& inputs, std::size_t points,
                                    double width_sigmas) {
  model.validate();
  if (model.n() > 2) throw UnsupportedConfiguration("grid filter supports at most two states");
  if (points < 3) throw ContractViolation("grid filter needs at least 3 points per axis");
  const auto n = model.n();
  const Matrix I = Matrix::Identity(n, n);
  const Vector stationary_mean = (I - model.A).fullPivLu().solve(model.B * inputs.mean);
  const Matrix drive = model.Q + model.B * inputs.covariance * model.B.transpose();
  const Matrix stationary_cov = stationary_covariance(model.A, drive);

  std::vector<GridAxis> axes;
  for (int d = 0; d < n; ++d) {
    const double s_sd = std::sqrt(std::max(stationary_cov(d, d), 0.0));
    const double p_sd = std::sqrt(std::max(model.P1(d, d), 0.0));
    double lo = std::min(stationary_mean(d) - width_sigmas * s_sd, model.mu1(d) - width_sigmas * p_sd);
    double hi = std::max(stationary_mean(d) + width_sigmas * s_sd, model.mu1(d) + width_sigmas * p_sd);
    if (!(hi - lo > 1e-9)) {
      lo -= 1.0;
      hi += 1.0;
    }
    axes.push_back({lo, hi, points});
  }
  return axes;
}

GridFilter grid_init(const StateSpaceModel& model, std::vector<GridAxis> axes) {
  model.validate();
  if (static_cast<int>(axes.size()) != model.n() || axes.empty() || axes.size() > 2) {
    throw UnsupportedConfiguration("grid filter supports one or two states with one axis each");
  }
  GridFilter g;
  g.axes = std::move(axes);
  std::size_t total = 1;
  for (const auto& a : g.axes) {
    if (a.points < 3 || !(a.upper > a.lower)) throw ContractViolation("grid filter: degenerate axis");
    total *= a.points;
  }
  g.masses.assign(total, 0.0);

  Eigen::LLT<Matrix> llt(model.P1);
  if (llt.info() == Eigen::Success) {
    for (std::size_t i = 0; i < total; ++i) g.masses[i] = std::exp(gaussian_logpdf(g.point(i), model.mu1, model.P1));
  } else {
    deposit(g.masses, g.axes, model.mu1, 1.0);
  }
  normalize(g.masses);
  check_edges(g);
  return g;
}

GridFilter grid_correct(GridFilter state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                        const UniformQuantizer& q) {
  std::vector<double> loglik(state.size(), -std::numeric_limits<double>::infinity());
  double max_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state.masses[i] == 0.0) continue;
    loglik[i] = exact_region_loglik(y, state.point(i), u, model, q);
    max_ll = std::max(max_ll, loglik[i]);
  }
  if (!std::isfinite(max_ll)) throw DegenerateUpdate("grid filter: measurement has zero likelihood on the grid");
  for (std::size_t i = 0; i < state.size(); ++i) {
    state.masses[i] = state.masses[i] == 0.0 ? 0.0 : state.masses[i] * std::exp(loglik[i] - max_ll);
  }
  double total = 0.0;
  for (double m : state.masses) total += m;
  if (!(total > 0.0)) throw DegenerateUpdate("grid filter: posterior mass underflowed");
  normalize(state.masses);
  state.filtered = grid_moments(state);
  return state;
}

GridFilter grid_predict(GridFilter state, const Vector& u, const StateSpaceModel& model) {
  const std::size_t dims = state.axes.size();
  const Vector bu = model.B * u;
  std::vector<double> next(state.size(), 0.0);
  const double max_mass = *std::max_element(state.masses.begin(), state.masses.end());
  const bool noise_free = model.Q.cwiseAbs().maxCoeff() == 0.0;

  Matrix q_inv;
  double log_norm = 0.0;
  std::vector<double> reach(dims);
  if (!noise_free) {
    Eigen::LLT<Matrix> llt(model.Q);
    if (llt.info() != Eigen::Success) {
      throw UnsupportedConfiguration("grid filter needs Q positive definite or exactly zero");
    }
    q_inv = llt.solve(Matrix::Identity(static_cast<Eigen::Index>(dims), static_cast<Eigen::Index>(dims)));
    double cell = 1.0;
    for (const auto& a : state.axes) cell *= a.spacing();
    log_norm = std::log(cell) - 0.5 * (static_cast<double>(dims) * std::log(2.0 * std::numbers::pi) +
                                       std::log(model.Q.determinant()));
    for (std::size_t d = 0; d < dims; ++d) {
      reach[d] = kKernelSigmas * std::sqrt(model.Q(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
    }
  }

  for (std::size_t src = 0; src < state.size(); ++src) {
    const double mass = state.masses[src];
    if (mass <= kNegligibleSource * max_mass) continue;
    const Vector target = model.A * state.point(src) + bu;
    if (noise_free) {
      deposit(next, state.axes, target, mass);
      continue;
    }
    std::vector<std::size_t> lo(dims), hi(dims);
    bool empty = false;
    for (std::size_t d = 0; d < dims; ++d) {
      const auto& a = state.axes[d];
      const double t = target(static_cast<Eigen::Index>(d));
      const double first = std::ceil((t - reach[d] - a.lower) / a.spacing());
      const double last = std::floor((t + reach[d] - a.lower) / a.spacing());
      if (last < 0.0 || first > static_cast<double>(a.points - 1)) {
        empty = true;
        break;
      }
      lo[d] = static_cast<std::size_t>(std::max(first, 0.0));
      hi[d] = static_cast<std::size_t>(std::min(last, static_cast<double>(a.points - 1)));
    }
    if (empty) continue;
    if (dims == 1) {
      const double inv_var = q_inv(0, 0);
      for (std::size_t k = lo[0]; k <= hi[0]; ++k) {
        const double r = state.axes[0].at(k) - target(0);
        next[k] += mass * std::exp(log_norm - 0.5 * inv_var * r * r);
      }
    } else {
      for (std::size_t k0 = lo[0]; k0 <= hi[0]; ++k0) {
        const double r0 = state.axes[0].at(k0) - target(0);
        for (std::size_t k1 = lo[1]; k1 <= hi[1]; ++k1) {
          const double r1 = state.axes[1].at(k1) - target(1);
          const double quad = q_inv(0, 0) * r0 * r0 + 2.0 * q_inv(0, 1) * r0 * r1 + q_inv(1, 1) * r1 * r1;
          next[k0 * state.axes[1].points + k1] += mass * std::exp(log_norm - 0.5 * quad);
        }
      }
    }
  }
  state.masses = std::move(next);
  check_edges(state);
  normalize(state.masses);
  ++state.t;
  return state;
}

GridFilter grid_filter_step(GridFilter state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                            const UniformQuantizer& q) {
  return grid_predict(grid_correct(std::move(state), y, u, model, q), u, model);
}

}  // namespace qgsf
