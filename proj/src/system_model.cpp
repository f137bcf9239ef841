#include "qgsf/system_model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <fmt/format.h>

namespace qgsf {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

void check_psd(const Matrix& m, const char* name, int dim) {
  if (m.rows() != dim || m.cols() != dim) {
    throw ContractViolation(std::string("state-space model: ") + name + " has wrong dimensions");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ContractViolation(std::string("state-space model: ") + name + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-12 * scale) {
    throw ContractViolation(std::string("state-space model: ") + name + " is not positive semidefinite");
  }
}

}  // namespace

void StateSpaceModel::validate() const {
  const int nx = n();
  const int nu = m();
  const int ny = p();
  if (nx < 1 || ny < 1) throw ContractViolation("state-space model: empty state or output");
  if (A.cols() != nx || B.rows() != nx || C.cols() != nx || D.rows() != ny || D.cols() != nu) {
    throw ContractViolation("state-space model: inconsistent matrix dimensions");
  }
  if (mu1.size() != nx) throw ContractViolation("state-space model: mu1 has wrong dimension");
  check_psd(Q, "Q", nx);
  check_psd(R, "R", ny);
  check_psd(P1, "P1", nx);
}

UniformQuantizer::UniformQuantizer(Vector step) : step_(std::move(step)) {
  if (step_.size() < 1) throw ContractViolation("quantizer needs at least one axis");
  for (int j = 0; j < step_.size(); ++j) {
    if (!(step_(j) > 0.0) || !std::isfinite(step_(j))) {
      throw ContractViolation("quantizer step sizes must be positive and finite");
    }
  }
}

Scenario scenario_siso() {
  StateSpaceModel model;
  model.A = Matrix::Constant(1, 1, 0.8);
  model.B = Matrix::Constant(1, 1, 1.5);
  model.C = Matrix::Constant(1, 1, 2.8);
  model.D = Matrix::Constant(1, 1, 1.8);
  model.Q = Matrix::Constant(1, 1, 1.0);
  model.R = Matrix::Constant(1, 1, 0.1);
  model.mu1 = Vector::Constant(1, 1.0);
  model.P1 = Matrix::Constant(1, 1, 2.0);
  return {model, UniformQuantizer::uniform(1, 10.0), {Vector::Zero(1), Matrix::Constant(1, 1, 2.0)}};
}

Scenario scenario_mimo() {
  StateSpaceModel model;
  model.A.resize(2, 2);
  model.A << 0.7362, 0.1636, 0.1636, 0.7362;
  model.B.resize(2, 2);
  model.B << 0.8, 0.4, 1.2, 0.4;
  model.C.resize(2, 2);
  model.C << 1.05, 0.35, 1.40, 0.70;
  model.D.resize(2, 2);
  model.D << 0.40, 0.80, 1.20, 0.16;
  model.Q = 0.5 * Matrix::Identity(2, 2);
  model.R = 0.1 * Matrix::Identity(2, 2);
  model.mu1 = Vector(2);
  model.mu1 << 1.0, 2.0;
  model.P1 = 0.01 * Matrix::Identity(2, 2);
  Vector u_mean(2);
  u_mean << 1.0, 2.0;
  return {model, UniformQuantizer::uniform(2, 7.0), {u_mean, 2.0 * Matrix::Identity(2, 2)}};
}

Vector quantize(const Vector& z, const UniformQuantizer& q) {
  if (z.size() != q.dim()) throw ContractViolation("quantize: dimension mismatch");
  Vector y(z.size());
  for (int j = 0; j < z.size(); ++j) y(j) = q.step()(j) * std::floor(z(j) / q.step()(j) + 0.5);
  return y;
}

std::vector<std::pair<double, double>> region_bounds(const Vector& y, const UniformQuantizer& q) {
  if (y.size() != q.dim()) throw ContractViolation("region_bounds: dimension mismatch");
  std::vector<std::pair<double, double>> out;
  out.reserve(static_cast<std::size_t>(y.size()));
  for (int j = 0; j < y.size(); ++j) {
    const double step = q.step()(j);
    const double level = y(j) / step;
    if (!std::isfinite(level) || std::abs(level - std::round(level)) > 1e-9) {
      throw ContractViolation(fmt::format("region_bounds: y[{}] = {} is not a multiple of step {}", j, y(j), step));
    }
    out.emplace_back(y(j) - 0.5 * step, y(j) + 0.5 * step);
  }
  return out;
}

Matrix psd_factor(const Matrix& cov) {
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

namespace {

Vector standard_normal(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector e(dim);
  for (int i = 0; i < dim; ++i) e(i) = normal(rng);
  return e;
}

}  // namespace

Trajectory simulate(const StateSpaceModel& model, const UniformQuantizer& q, const std::vector<Vector>& inputs,
                    std::uint64_t seed) {
  model.validate();
  if (inputs.empty()) throw ContractViolation("simulate: horizon must be at least 1");
  if (q.dim() != model.p()) throw ContractViolation("simulate: quantizer dimension does not match outputs");
  const Matrix lq = psd_factor(model.Q);
  const Matrix lr = psd_factor(model.R);
  const Matrix lp = psd_factor(model.P1);

  std::seed_seq seq{seed, std::uint64_t{0x6e6f697365}};
  std::mt19937_64 rng(seq);
  Trajectory traj;
  traj.seed = seed;
  Vector x = model.mu1 + lp * standard_normal(model.n(), rng);
  for (const Vector& u : inputs) {
    if (u.size() != model.m()) throw ContractViolation("simulate: input has wrong dimension");
    Vector z = model.C * x + model.D * u + lr * standard_normal(model.p(), rng);
    traj.y.push_back(quantize(z, q));
    traj.z.push_back(std::move(z));
    traj.u.push_back(u);
    traj.x.push_back(x);
    x = model.A * x + model.B * u + lq * standard_normal(model.n(), rng);
  }
  return traj;
}

Trajectory simulate(const StateSpaceModel& model, const UniformQuantizer& q, const InputSpec& inputs,
                    std::size_t horizon, std::uint64_t seed) {
  if (horizon < 1) throw ContractViolation("simulate: horizon must be at least 1");
  if (inputs.mean.size() != model.m()) throw ContractViolation("simulate: input mean has wrong dimension");
  const Matrix lu = psd_factor(inputs.covariance);
  std::seed_seq seq{seed, std::uint64_t{0x696e707574}};
  std::mt19937_64 rng(seq);
  std::vector<Vector> u;
  u.reserve(horizon);
  for (std::size_t t = 0; t < horizon; ++t) u.push_back(inputs.mean + lu * standard_normal(model.m(), rng));
  return simulate(model, q, u, seed);
}

double log_normal_cdf(double x) {
  if (x < -30.0) {
    // Asymptotic expansion of the Mills ratio.
    const double inv = 1.0 / (x * x);
    const double series =
        1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv * (1.0 - 9.0 * inv * (1.0 - 11.0 * inv)))));
    return -0.5 * x * x - std::log(-x) - kHalfLog2Pi + std::log(series);
  }
  if (x < 0.0) return std::log(0.5 * std::erfc(-x * kInvSqrt2));
  return std::log1p(-0.5 * std::erfc(x * kInvSqrt2));
}

double log_normal_interval(double lo, double hi) {
  if (std::isnan(lo) || std::isnan(hi)) return std::numeric_limits<double>::quiet_NaN();
  if (!(hi > lo)) return -std::numeric_limits<double>::infinity();
  if (lo > 0.0) {
    // Mirror the upper tail into the lower one.
    const double t = lo;
    lo = -hi;
    hi = -t;
  }
  if (hi <= 0.0) {
    const double log_hi = log_normal_cdf(hi);
    const double log_lo = log_normal_cdf(lo);
    return log_hi + std::log1p(-std::exp(log_lo - log_hi));
  }
  // lo <= 0 < hi: the cell covers the mode.
  const double outside = 0.5 * std::erfc(-lo * kInvSqrt2) + 0.5 * std::erfc(hi * kInvSqrt2);
  if (outside < 0.5) return std::log1p(-outside);
  return std::log(0.5 * (std::erf(hi * kInvSqrt2) + std::erf(-lo * kInvSqrt2)));
}

double exact_region_loglik(const Vector& y, const Vector& x, const Vector& u, const StateSpaceModel& model,
                           const UniformQuantizer& q) {
  const Matrix& r = model.R;
  for (int i = 0; i < r.rows(); ++i) {
    for (int j = 0; j < r.cols(); ++j) {
      if (i != j && r(i, j) != 0.0) {
        throw UnsupportedConfiguration(
            "exact region likelihood needs a diagonal R; use the Gaussian-mixture likelihood instead");
      }
    }
  }
  const auto bounds = region_bounds(y, q);
  const Vector c = model.C * x + model.D * u;
  double total = 0.0;
  for (int j = 0; j < c.size(); ++j) {
    const double sigma = std::sqrt(r(j, j));
    total += log_normal_interval((bounds[j].first - c(j)) / sigma, (bounds[j].second - c(j)) / sigma);
  }
  return total;
}

void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (traj.length() == 0) {
    os << "t\n";
    return;
  }
  const auto n = traj.x.front().size();
  const auto p = traj.z.front().size();
  const auto m = traj.u.front().size();
  os << 't';
  for (Eigen::Index i = 1; i <= n; ++i) os << ",x" << i;
  for (Eigen::Index i = 1; i <= p; ++i) os << ",z" << i;
  for (Eigen::Index i = 1; i <= p; ++i) os << ",y" << i;
  for (Eigen::Index i = 1; i <= m; ++i) os << ",u" << i;
  os << '\n';
  for (std::size_t t = 0; t < traj.length(); ++t) {
    os << (t + 1);
    for (const Vector* v : {&traj.x[t], &traj.z[t], &traj.y[t], &traj.u[t]}) {
      for (Eigen::Index i = 0; i < v->size(); ++i) os << ',' << fmt::format("{}", (*v)(i));
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Trajectory read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trajectory file " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty file");

  int n = 0, p = 0, py = 0, m = 0;
  {
    std::stringstream header(line);
    std::string col;
    int index = 0;
    while (std::getline(header, col, ',')) {
      if (index++ == 0) {
        if (col != "t") throw std::runtime_error(path.string() + ":1: first column must be 't'");
        continue;
      }
      switch (col.empty() ? '?' : col.front()) {
        case 'x': ++n; break;
        case 'z': ++p; break;
        case 'y': ++py; break;
        case 'u': ++m; break;
        default: throw std::runtime_error(path.string() + ":1: unexpected column '" + col + "'");
      }
    }
  }
  if (p != py) throw std::runtime_error(path.string() + ":1: z and y column counts differ");

  Trajectory traj;
  const int width = 1 + n + 2 * p + m;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> values;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw std::runtime_error(fmt::format("{}:{}: cannot parse '{}'", path.string(), line_no, cell));
      }
      values.push_back(v);
    }
    if (static_cast<int>(values.size()) != width) {
      throw std::runtime_error(fmt::format("{}:{}: expected {} fields, got {}", path.string(), line_no, width,
                                           values.size()));
    }
    int k = 1;
    auto take = [&](int count) {
      Vector v(count);
      for (int i = 0; i < count; ++i) v(i) = values[static_cast<std::size_t>(k++)];
      return v;
    };
    traj.x.push_back(take(n));
    traj.z.push_back(take(p));
    traj.y.push_back(take(p));
    traj.u.push_back(take(m));
  }
  return traj;
}

}  // namespace qgsf
