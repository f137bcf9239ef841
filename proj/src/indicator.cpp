#include "qgsf/indicator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "qgsf/system_model.hpp"

namespace qgsf {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kCollapseVariance = 1e-12;
constexpr double kNegligibleLog = -40.0;

}  // namespace

double UnitIntervalGmm::density(double x) const {
  double f = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    const double r = x - means[j];
    f += weights[j] * std::exp(-0.5 * r * r / variances[j]) / std::sqrt(2.0 * std::numbers::pi * variances[j]);
  }
  return f;
}

void UnitIntervalGmm::validate() const {
  if (weights.empty()) throw ContractViolation("unit GMM has no components");
  if (means.size() != weights.size() || variances.size() != weights.size()) {
    throw ContractViolation("unit GMM parameter lists differ in length");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (!(weights[j] > 0.0)) throw ContractViolation("unit GMM weight " + std::to_string(j) + " is not positive");
    if (!(variances[j] > 0.0)) throw ContractViolation("unit GMM variance " + std::to_string(j) + " is not positive");
    if (!std::isfinite(means[j])) throw ContractViolation("unit GMM mean " + std::to_string(j) + " is not finite");
    total += weights[j];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractViolation("unit GMM weights sum to " + std::to_string(total) + ", expected 1");
  }
}

UnitIntervalGmm em_fit_unit(std::span<const double> samples, int k1, const EmConfig& config,
                            std::uint64_t seed) {
  if (k1 < 1) throw ContractViolation("em_fit_unit: K1 must be at least 1");
  if (samples.empty()) throw ContractViolation("em_fit_unit: no samples");
  const std::size_t n = samples.size();
  const auto k = static_cast<std::size_t>(k1);

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> w(k, 1.0 / k1);
  std::vector<double> mu(k);
  std::vector<double> var(k, 1.0 / (static_cast<double>(k1) * k1));
  for (std::size_t j = 0; j < k; ++j) {
    const double q = (static_cast<double>(j) + 0.5) / k1;
    const auto idx = std::min(n - 1, static_cast<std::size_t>(q * static_cast<double>(n)));
    mu[j] = sorted[idx];
  }

  UnitIntervalGmm out;
  out.n_samples = n;
  out.seed = seed;
  std::mt19937_64 reseed_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<double> bias(k), inv2v(k), lp(k);
  std::vector<double> sum_r(k), sum_rd(k), sum_rdd(k);
  double prev_ll = -std::numeric_limits<double>::infinity();
  int iterations = 0;

  for (int it = 0;; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      bias[j] = std::log(w[j]) - 0.5 * (kLog2Pi + std::log(var[j]));
      inv2v[j] = 0.5 / var[j];
    }
    std::fill(sum_r.begin(), sum_r.end(), 0.0);
    std::fill(sum_rd.begin(), sum_rd.end(), 0.0);
    std::fill(sum_rdd.begin(), sum_rdd.end(), 0.0);
    double ll = 0.0;

    // E-step fused with the sufficient statistics of the M-step. Deviations
    // are taken about the current means for conditioning. Terms more than
    // kNegligibleLog below the largest are under one ulp of the total.
    for (double x : sorted) {  // sorted order keeps the skip branch predictable
      double max_lp = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = x - mu[j];
        lp[j] = bias[j] - inv2v[j] * d * d;
        max_lp = std::max(max_lp, lp[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double rel = lp[j] - max_lp;
        lp[j] = rel < kNegligibleLog ? 0.0 : std::exp(rel);
        total += lp[j];
      }
      ll += max_lp + std::log(total);
      const double inv_total = 1.0 / total;
      for (std::size_t j = 0; j < k; ++j) {
        if (lp[j] == 0.0) continue;
        const double r = lp[j] * inv_total;
        const double d = x - mu[j];
        sum_r[j] += r;
        sum_rd[j] += r * d;
        sum_rdd[j] += r * d * d;
      }
    }
    ll /= static_cast<double>(n);
    out.loglik_trace.push_back(ll);
    out.final_loglik = ll;

    if (it >= config.max_iter || (it > 0 && ll - prev_ll < config.tol)) break;
    prev_ll = ll;

    for (std::size_t j = 0; j < k; ++j) {
      if (sum_r[j] <= 0.0) {
        var[j] = 0.0;  // empty component, handled as a collapse below
        continue;
      }
      const double shift = sum_rd[j] / sum_r[j];
      w[j] = sum_r[j] / static_cast<double>(n);
      mu[j] += shift;
      var[j] = sum_rdd[j] / sum_r[j] - shift * shift;
    }
    bool reset = false;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t j = 0; j < k; ++j) {
      if (var[j] >= kCollapseVariance) continue;
      mu[j] = samples[pick(reseed_rng)];
      var[j] = 1.0 / (static_cast<double>(k1) * k1);
      w[j] = 1.0 / k1;
      ++out.collapse_resets;
      reset = true;
    }
    if (reset) {
      double total = 0.0;
      for (double v : w) total += v;
      for (double& v : w) v /= total;
      // A reset component breaks monotonicity, so restart the convergence test.
      prev_ll = -std::numeric_limits<double>::infinity();
    }
    ++iterations;
  }

  double total = 0.0;
  for (double v : w) total += v;
  for (double& v : w) v /= total;
  out.weights = std::move(w);
  out.means = std::move(mu);
  out.variances = std::move(var);
  out.em_iterations = iterations;
  return out;
}

UnitIntervalGmm train_unit_gmm(std::size_t n_samples, int k1, std::uint64_t seed, const EmConfig& config) {
  if (k1 < 1) throw ContractViolation("train_unit_gmm: K1 must be at least 1");
  if (n_samples < 10 * static_cast<std::size_t>(k1)) {
    throw ContractViolation("train_unit_gmm: need at least 10*K1 samples, got " + std::to_string(n_samples));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> samples(n_samples);
  for (double& s : samples) s = uniform(rng);
  return em_fit_unit(samples, k1, config, seed);
}

GaussianMixture scale_to_interval(const UnitIntervalGmm& g, double a, double b) {
  if (!(b > a)) throw ContractViolation("scale_to_interval: need b > a");
  const double width = b - a;
  std::vector<GaussianComponent> comps;
  comps.reserve(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    comps.push_back({width * g.weights[j], Vector::Constant(1, a + width * g.means[j]),
                     Matrix::Constant(1, 1, width * width * g.variances[j])});
  }
  return GaussianMixture(std::move(comps), false);
}

IndicatorGmm tensor_product(std::span<const GaussianMixture> per_dim) {
  if (per_dim.empty()) throw ContractViolation("tensor_product: need at least one dimension");
  const auto p = static_cast<int>(per_dim.size());
  for (const auto& g : per_dim) {
    if (g.dim() != 1) throw ContractViolation("tensor_product: inputs must be univariate");
  }
  std::size_t count = 1;
  for (const auto& g : per_dim) count *= g.size();

  std::vector<GaussianComponent> comps;
  comps.reserve(count);
  std::vector<std::size_t> index(per_dim.size(), 0);
  for (std::size_t c = 0; c < count; ++c) {
    GaussianComponent comp{1.0, Vector(p), Matrix::Zero(p, p)};
    for (int d = 0; d < p; ++d) {
      const auto& g = per_dim[d][index[d]];
      comp.weight *= g.weight;
      comp.mean(d) = g.mean(0);
      comp.covariance(d, d) = g.covariance(0, 0);
    }
    comps.push_back(std::move(comp));
    for (int d = p - 1; d >= 0; --d) {  // last axis varies fastest
      if (++index[d] < per_dim[d].size()) break;
      index[d] = 0;
    }
  }
  return IndicatorGmm{GaussianMixture(std::move(comps), false), {}, 0.0};
}

IndicatorGmm regularize(const IndicatorGmm& g, double alpha) {
  if (!(alpha >= 0.0)) throw ContractViolation("regularize: alpha must be nonnegative");
  std::vector<GaussianComponent> comps = g.mixture.components();
  for (auto& c : comps) c.covariance.diagonal().array() += alpha;
  return IndicatorGmm{GaussianMixture(std::move(comps), false), g.bounds, g.alpha + alpha};
}

IndicatorGmm indicator_for_output(const Vector& y, const UniformQuantizer& q, const UnitIntervalGmm& base,
                                  double alpha) {
  const auto bounds = region_bounds(y, q);
  std::vector<GaussianMixture> per_dim;
  per_dim.reserve(bounds.size());
  for (const auto& [a, b] : bounds) per_dim.push_back(scale_to_interval(base, a, b));
  IndicatorGmm out = regularize(tensor_product(per_dim), alpha);
  out.bounds = bounds;
  return out;
}

namespace {

GaussianMixture unit_cube_tensor(const UnitIntervalGmm& base, int p) {
  base.validate();
  if (p < 1) throw ContractViolation("indicator template: output dimension must be positive");
  std::vector<GaussianMixture> per_dim(static_cast<std::size_t>(p), scale_to_interval(base, 0.0, 1.0));
  return tensor_product(per_dim).mixture;
}

}  // namespace

IndicatorTemplate::IndicatorTemplate(const UnitIntervalGmm& base, int p, std::size_t reduce_to)
    : dim_(p), unit_(unit_cube_tensor(base, p)) {
  if (reduce_to > 0) unit_ = reduce_runnalls(unit_, reduce_to);
}

IndicatorGmm IndicatorTemplate::place(std::span<const std::pair<double, double>> bounds, double alpha) const {
  if (static_cast<int>(bounds.size()) != dim_) throw ContractViolation("indicator template: bounds dimension mismatch");
  if (!(alpha >= 0.0)) throw ContractViolation("indicator template: alpha must be nonnegative");
  Vector lower(dim_), width(dim_);
  double volume = 1.0;
  for (int d = 0; d < dim_; ++d) {
    lower(d) = bounds[d].first;
    width(d) = bounds[d].second - bounds[d].first;
    if (!(width(d) > 0.0)) throw ContractViolation("indicator template: empty interval");
    volume *= width(d);
  }
  std::vector<GaussianComponent> comps;
  comps.reserve(unit_.size());
  for (const auto& c : unit_.components()) {
    GaussianComponent out;
    out.weight = volume * c.weight;
    out.mean = lower + width.cwiseProduct(c.mean);
    out.covariance = width.asDiagonal() * c.covariance * width.asDiagonal();
    out.covariance.diagonal().array() += alpha;
    comps.push_back(std::move(out));
  }
  return IndicatorGmm{GaussianMixture(std::move(comps), false), {bounds.begin(), bounds.end()}, alpha};
}

IndicatorGmm IndicatorTemplate::for_output(const Vector& y, const UniformQuantizer& q, double alpha) const {
  const auto bounds = region_bounds(y, q);
  return place(bounds, alpha);
}

void save_model(const UnitIntervalGmm& g, const std::filesystem::path& path) {
  nlohmann::json j;
  j["K1"] = g.size();
  j["weights"] = g.weights;
  j["means"] = g.means;
  j["variances"] = g.variances;
  j["n_samples"] = g.n_samples;
  j["seed"] = g.seed;
  j["em_iterations"] = g.em_iterations;
  j["final_loglik"] = g.final_loglik;
  j["collapse_resets"] = g.collapse_resets;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

namespace {

template <typename T>
T require_field(const nlohmann::json& j, const char* name, const std::string& origin) {
  if (!j.contains(name)) throw ModelFormatError(origin + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(origin + ": field '" + name + "' has the wrong type (" + e.what() + ")");
  }
}

}  // namespace

UnitIntervalGmm load_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ModelFormatError("cannot open model file " + path.string());
  std::stringstream buffer;
  buffer << is.rdbuf();
  const std::string text = buffer.str();
  const std::string origin = path.string();

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto offset = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n');
    throw ModelFormatError(origin + ":" + std::to_string(line) + ": parse error: " + e.what());
  }
  if (!j.is_object()) throw ModelFormatError(origin + ": expected a JSON object");

  UnitIntervalGmm g;
  const auto k1 = require_field<std::size_t>(j, "K1", origin);
  g.weights = require_field<std::vector<double>>(j, "weights", origin);
  g.means = require_field<std::vector<double>>(j, "means", origin);
  g.variances = require_field<std::vector<double>>(j, "variances", origin);
  g.n_samples = require_field<std::size_t>(j, "n_samples", origin);
  g.seed = require_field<std::uint64_t>(j, "seed", origin);
  g.em_iterations = require_field<int>(j, "em_iterations", origin);
  g.final_loglik = require_field<double>(j, "final_loglik", origin);
  if (j.contains("collapse_resets")) g.collapse_resets = require_field<int>(j, "collapse_resets", origin);
  if (g.weights.size() != k1) {
    throw ModelFormatError(origin + ": field 'weights' has " + std::to_string(g.weights.size()) +
                           " entries but K1 = " + std::to_string(k1));
  }
  try {
    g.validate();
  } catch (const ContractViolation& e) {
    throw ModelFormatError(origin + ": invariant violated: " + e.what());
  }
  return g;
}

}  // namespace qgsf
