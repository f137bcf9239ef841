#include "qgsf/gaussian_mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace qgsf {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

void validate_component(const GaussianComponent& c, int dim, std::size_t index) {
  if (c.dim() != dim || c.covariance.rows() != dim || c.covariance.cols() != dim) {
    throw ContractViolation("mixture component " + std::to_string(index) +
                            " has inconsistent dimension");
  }
  if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) {
    throw ContractViolation("mixture component " + std::to_string(index) +
                            " has invalid weight " + std::to_string(c.weight));
  }
  const double scale = std::max(1.0, c.covariance.cwiseAbs().maxCoeff());
  if ((c.covariance - c.covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ContractViolation("mixture component " + std::to_string(index) +
                            " has a non-symmetric covariance");
  }
}

// log det of an SPD matrix; throws FactorizationError when not SPD.
double spd_log_det(const Matrix& m) {
  const auto n = m.rows();
  if (n == 1) {
    if (!(m(0, 0) > 0.0)) throw FactorizationError("covariance is not positive definite");
    return std::log(m(0, 0));
  }
  if (n == 2) {
    const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    if (!(m(0, 0) > 0.0) || !(det > 0.0)) {
      throw FactorizationError("covariance is not positive definite");
    }
    return std::log(det);
  }
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw FactorizationError("covariance is not positive definite");
  const Matrix& l = llt.matrixLLT();
  return 2.0 * l.diagonal().array().log().sum();
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<GaussianComponent> components, bool normalized)
    : components_(std::move(components)), normalized_(normalized) {
  if (components_.empty()) throw ContractViolation("a Gaussian mixture needs at least one component");
  const int d = components_.front().dim();
  if (d < 1) throw ContractViolation("mixture dimension must be positive");
  for (std::size_t i = 0; i < components_.size(); ++i) validate_component(components_[i], d, i);
  if (normalized_) {
    const double total = total_weight();
    if (std::abs(total - 1.0) > 1e-9) {
      throw ContractViolation("normalized mixture weights sum to " + std::to_string(total));
    }
  }
}

GaussianMixture GaussianMixture::single(const Vector& mean, const Matrix& covariance) {
  return GaussianMixture({GaussianComponent{1.0, mean, covariance}}, true);
}

double GaussianMixture::total_weight() const {
  double total = 0.0;
  for (const auto& c : components_) total += c.weight;
  return total;
}

double GaussianMixture::log_evaluate(const Vector& x) const {
  std::vector<double> terms;
  terms.reserve(components_.size());
  for (std::size_t i = 0; i < components_.size(); ++i) {
    const auto& c = components_[i];
    if (c.weight <= 0.0) continue;
    try {
      terms.push_back(std::log(c.weight) + gaussian_logpdf(x, c.mean, c.covariance));
    } catch (const FactorizationError& e) {
      throw FactorizationError(std::string(e.what()) + " (component " + std::to_string(i) + ")");
    }
  }
  return log_sum_exp(terms);
}

double GaussianMixture::evaluate(const Vector& x) const { return std::exp(log_evaluate(x)); }

double log_sum_exp(std::span<const double> values) {
  double max_value = -std::numeric_limits<double>::infinity();
  for (double v : values) max_value = std::max(max_value, v);
  if (!std::isfinite(max_value)) return max_value;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - max_value);
  return max_value + std::log(sum);
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

double gaussian_logpdf(const Vector& x, const Vector& mean, const Matrix& covariance) {
  const auto d = mean.size();
  if (x.size() != d || covariance.rows() != d || covariance.cols() != d) {
    throw ContractViolation("gaussian_logpdf: dimension mismatch");
  }
  if (d == 1) {
    const double var = covariance(0, 0);
    if (!(var > 0.0)) throw FactorizationError("covariance is not positive definite");
    const double r = x(0) - mean(0);
    return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
  }
  Eigen::LLT<Matrix> llt(covariance);
  if (llt.info() != Eigen::Success) throw FactorizationError("covariance is not positive definite");
  const Vector white = llt.matrixL().solve(x - mean);
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(d) * kLog2Pi + log_det + white.squaredNorm());
}

Moments mixture_moments(const GaussianMixture& m) {
  if (!m.normalized()) throw ContractViolation("mixture_moments requires a normalized mixture");
  const int d = m.dim();
  Vector mean = Vector::Zero(d);
  for (const auto& c : m.components()) mean += c.weight * c.mean;
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& c : m.components()) {
    const Vector diff = c.mean - mean;
    cov += c.weight * (c.covariance + diff * diff.transpose());
  }
  return {mean, symmetrize(cov)};
}

std::vector<Vector> mixture_sample(const GaussianMixture& m, std::size_t n, std::uint64_t seed) {
  if (!m.normalized()) throw ContractViolation("mixture_sample requires a normalized mixture");
  if (n < 1) throw ContractViolation("mixture_sample needs n >= 1");
  std::vector<double> weights;
  std::vector<Matrix> factors;
  for (std::size_t i = 0; i < m.size(); ++i) {
    weights.push_back(m[i].weight);
    Eigen::LLT<Matrix> llt(m[i].covariance);
    if (llt.info() != Eigen::Success) {
      throw FactorizationError("covariance of component " + std::to_string(i) +
                               " is not positive definite");
    }
    factors.emplace_back(llt.matrixL());
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal;
  std::vector<Vector> out;
  out.reserve(n);
  Vector e(m.dim());
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t k = pick(rng);
    for (int i = 0; i < e.size(); ++i) e(i) = normal(rng);
    out.push_back(m[k].mean + factors[k] * e);
  }
  return out;
}

GaussianComponent merge_moment_preserving(const GaussianComponent& a, const GaussianComponent& b) {
  if (a.dim() != b.dim()) throw ContractViolation("merge: dimension mismatch");
  const double w = a.weight + b.weight;
  if (!(w > 0.0)) throw ContractViolation("merge: both components have zero weight");
  const double fa = a.weight / w;
  const double fb = b.weight / w;
  const Vector diff = a.mean - b.mean;
  GaussianComponent out;
  out.weight = w;
  out.mean = fa * a.mean + fb * b.mean;
  out.covariance = symmetrize(fa * a.covariance + fb * b.covariance + (fa * fb) * diff * diff.transpose());
  return out;
}

namespace {

struct ReductionEntry {
  GaussianComponent component;
  double log_det = 0.0;
  bool active = true;
};

// Merged-covariance log det without heap traffic for the common d <= 2 case.
double merged_log_det(const GaussianComponent& a, const GaussianComponent& b) {
  const double w = a.weight + b.weight;
  const double fa = a.weight / w;
  const double fb = b.weight / w;
  const double spread = fa * fb;
  const int d = a.dim();
  if (d == 1) {
    const double dm = a.mean(0) - b.mean(0);
    return std::log(fa * a.covariance(0, 0) + fb * b.covariance(0, 0) + spread * dm * dm);
  }
  if (d == 2) {
    const double d0 = a.mean(0) - b.mean(0);
    const double d1 = a.mean(1) - b.mean(1);
    const double p00 = fa * a.covariance(0, 0) + fb * b.covariance(0, 0) + spread * d0 * d0;
    const double p11 = fa * a.covariance(1, 1) + fb * b.covariance(1, 1) + spread * d1 * d1;
    const double p01 = fa * a.covariance(0, 1) + fb * b.covariance(0, 1) + spread * d0 * d1;
    return std::log(p00 * p11 - p01 * p01);
  }
  return spd_log_det(merge_moment_preserving(a, b).covariance);
}

double pair_cost(const ReductionEntry& a, const ReductionEntry& b) {
  const double wa = a.component.weight;
  const double wb = b.component.weight;
  if (wa <= 0.0 || wb <= 0.0) return 0.0;
  const double w = wa + wb;
  return 0.5 * (w * merged_log_det(a.component, b.component) - wa * a.log_det - wb * b.log_det);
}

}  // namespace

double runnalls_dissimilarity(const GaussianComponent& a, const GaussianComponent& b) {
  if (a.dim() != b.dim()) throw ContractViolation("dissimilarity: dimension mismatch");
  ReductionEntry ea{a, spd_log_det(a.covariance)};
  ReductionEntry eb{b, spd_log_det(b.covariance)};
  return pair_cost(ea, eb);
}

GaussianMixture reduce_runnalls(const GaussianMixture& m, std::size_t target) {
  if (target == 0) throw ContractViolation("reduce_runnalls: target must be at least 1");
  if (m.size() <= target) return m;

  const std::size_t n = m.size();
  std::vector<ReductionEntry> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double log_det = 0.0;
    try {
      log_det = spd_log_det(m[i].covariance);
    } catch (const FactorizationError& e) {
      throw FactorizationError(std::string(e.what()) + " (component " + std::to_string(i) + ")");
    }
    entries.push_back({m[i], log_det, true});
  }

  // Pair costs are cached in a dense matrix so that re-finding a partner is a
  // scan over doubles. best[i]: cheapest partner of i among active entries;
  // ties go to the lower index.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<double> cost(n * n, kInf);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) cost[i * n + j] = cost[j * n + i] = pair_cost(entries[i], entries[j]);
  }
  std::vector<double> best_cost(n, kInf);
  std::vector<std::size_t> best(n, kNone);
  auto rescan = [&](std::size_t i) {
    best_cost[i] = kInf;
    best[i] = kNone;
    const double* row = cost.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      if (row[k] < best_cost[i]) {
        best_cost[i] = row[k];
        best[i] = k;
      }
    }
  };
  for (std::size_t i = 0; i < n; ++i) rescan(i);

  std::size_t active = n;
  while (active > target) {
    std::size_t i = kNone;
    for (std::size_t k = 0; k < n; ++k) {
      if (entries[k].active && (i == kNone || best_cost[k] < best_cost[i])) i = k;
    }
    std::size_t j = best[i];
    if (j < i) std::swap(i, j);

    if (entries[i].component.weight + entries[j].component.weight > 0.0) {
      entries[i].component = merge_moment_preserving(entries[i].component, entries[j].component);
      entries[i].log_det = spd_log_det(entries[i].component.covariance);
    }
    entries[j].active = false;
    --active;
    for (std::size_t k = 0; k < n; ++k) cost[j * n + k] = cost[k * n + j] = kInf;

    for (std::size_t k = 0; k < n; ++k) {
      if (k == i || !entries[k].active) continue;
      const double c = pair_cost(entries[i], entries[k]);
      cost[i * n + k] = cost[k * n + i] = c;
      if (best[k] == i || best[k] == j) {
        if (c <= best_cost[k] && best[k] == i) {
          best_cost[k] = c;  // i stayed the partner and only got closer
        } else {
          rescan(k);
        }
      } else if (c < best_cost[k] || (c == best_cost[k] && i < best[k])) {
        best_cost[k] = c;
        best[k] = i;
      }
    }
    rescan(i);
  }

  std::vector<GaussianComponent> out;
  out.reserve(target);
  for (auto& e : entries) {
    if (e.active) out.push_back(std::move(e.component));
  }
  if (m.normalized()) {
    // Merging only sums weights; renormalize away rounding drift.
    double total = 0.0;
    for (const auto& c : out) total += c.weight;
    for (auto& c : out) c.weight /= total;
  }
  return GaussianMixture(std::move(out), m.normalized());
}

}  // namespace qgsf
