#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "qgsf/filters.hpp"

namespace qgsf {

GaussianMixture gsf_correct(const GaussianMixture& prior, const Vector& u, const StateSpaceModel& model,
                            const IndicatorGmm& indicator, std::size_t cap) {
  if (!prior.normalized()) throw ContractViolation("gsf_correct: prior must be normalized");
  if (prior.dim() != model.n() || indicator.mixture.dim() != model.p()) {
    throw ContractViolation("gsf_correct: dimension mismatch");
  }
  const Matrix& C = model.C;
  const Vector du = model.D * u;
  const std::size_t K = indicator.mixture.size();
  const std::size_t M = prior.size();

  std::vector<double> log_weights;
  std::vector<GaussianComponent> comps;
  log_weights.reserve(K * M);
  comps.reserve(K * M);

  for (std::size_t k = 0; k < M; ++k) {
    const auto& pc = prior[k];
    const Vector predicted = C * pc.mean + du;
    const Matrix gain_num = pc.covariance * C.transpose();  // Gamma C^T
    const Matrix base_cov = C * gain_num + model.R;         // C Gamma C^T + R
    const double log_prior = pc.weight > 0.0 ? std::log(pc.weight) : -std::numeric_limits<double>::infinity();

    for (std::size_t j = 0; j < K; ++j) {
      const auto& ic = indicator.mixture[j];
      const Matrix innovation_cov = base_cov + ic.covariance;
      Eigen::LLT<Matrix> llt(innovation_cov);
      if (llt.info() != Eigen::Success) {
        throw FactorizationError(
            fmt::format("gsf_correct: innovation covariance not SPD for prior {} / indicator {}", k, j));
      }
      const Vector innovation = ic.mean - predicted;
      const Vector white = llt.matrixL().solve(innovation);
      const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      const double log_gauss =
          -0.5 * (static_cast<double>(innovation.size()) * 1.8378770664093454836 + log_det + white.squaredNorm());
      const double log_beta = ic.weight > 0.0 ? std::log(ic.weight) : -std::numeric_limits<double>::infinity();
      log_weights.push_back(log_beta + log_prior + log_gauss);

      // K = Gamma C^T S^-1, computed as (S^-1 C Gamma)^T.
      const Matrix gain = llt.solve(gain_num.transpose()).transpose();
      GaussianComponent out;
      out.mean = pc.mean + gain * innovation;
      out.covariance = symmetrize(pc.covariance - gain * gain_num.transpose());
      comps.push_back(std::move(out));
    }
  }

  const double log_norm = log_sum_exp(log_weights);
  if (!std::isfinite(log_norm)) {
    std::string cell;
    for (const auto& [a, b] : indicator.bounds) cell += fmt::format("[{}, {}) ", a, b);
    const auto moments = mixture_moments(prior);
    throw DegenerateUpdate(fmt::format("gsf_correct: every component weight underflowed for cell {}(prior mean {})",
                                       cell, moments.mean.transpose()(0)));
  }
  // Shift by the max before normalizing; far-tail log weights are large enough to lose digits otherwise.
  const double max_lw = *std::max_element(log_weights.begin(), log_weights.end());
  for (double& lw : log_weights) lw -= max_lw;
  const double shifted_norm = log_sum_exp(log_weights);
  for (std::size_t l = 0; l < comps.size(); ++l) comps[l].weight = std::exp(log_weights[l] - shifted_norm);

  // Renormalize the linear weights to absorb exp/log rounding.
  double total = 0.0;
  for (const auto& c : comps) total += c.weight;
  for (auto& c : comps) c.weight /= total;

  GaussianMixture posterior(std::move(comps), true);
  if (cap > 0) return reduce_runnalls(posterior, cap);
  return posterior;
}

GaussianMixture gsf_predict(const GaussianMixture& posterior, const Vector& u, const StateSpaceModel& model) {
  const Vector bu = model.B * u;
  std::vector<GaussianComponent> comps;
  comps.reserve(posterior.size());
  for (const auto& c : posterior.components()) {
    comps.push_back({c.weight, model.A * c.mean + bu,
                     symmetrize(model.Q + model.A * c.covariance * model.A.transpose())});
  }
  return GaussianMixture(std::move(comps), posterior.normalized());
}

Estimate gsf_estimate(const GaussianMixture& mixture) {
  auto moments = mixture_moments(mixture);
  return {std::move(moments.mean), std::move(moments.covariance)};
}

std::shared_ptr<const IndicatorTemplate> make_indicator_template(const UnitIntervalGmm& base, int p,
                                                                 const GsfConfig& config) {
  const std::size_t reduce_to = p >= 2 ? config.indicator_components : 0;
  return std::make_shared<const IndicatorTemplate>(base, p, reduce_to);
}

GsfState gsf_init(const StateSpaceModel& model, std::shared_ptr<const IndicatorTemplate> indicator,
                  const GsfConfig& config) {
  model.validate();
  if (!indicator || indicator->dim() != model.p()) {
    throw ContractViolation("gsf_init: indicator template does not match the output dimension");
  }
  if (config.reduction_cap < 1) throw ContractViolation("gsf_init: reduction cap must be at least 1");
  return GsfState{GaussianMixture::single(model.mu1, model.P1), std::move(indicator), config, 0, 0, {}};
}

GsfState gsf_step(GsfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q) {
  const IndicatorGmm likelihood = state.indicator->for_output(y, q, state.config.alpha);
  GaussianMixture posterior = state.mixture;
  try {
    posterior = gsf_correct(state.mixture, u, model, likelihood, state.config.reduction_cap);
  } catch (const DegenerateUpdate& e) {
    fmt::print(stderr, "warning: step {}: {}; keeping the prior\n", state.t + 1, e.what());
    ++state.skipped_updates;
  }
  state.filtered = gsf_estimate(posterior);
  state.mixture = gsf_predict(posterior, u, model);
  ++state.t;
  return state;
}

}  // namespace qgsf
