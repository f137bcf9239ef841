#include <cmath>

#include "qgsf/filters.hpp"

namespace qgsf {

namespace {

// LLT of an innovation covariance, with one trace-scaled jitter retry.
Eigen::LLT<Matrix> factor_innovation(Matrix s) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt;
  const double jitter = 1e-9 * std::max(s.trace() / static_cast<double>(s.rows()), 1e-300);
  s.diagonal().array() += jitter;
  llt.compute(s);
  if (llt.info() != Eigen::Success) throw FactorizationError("innovation covariance is not positive definite");
  return llt;
}

struct KalmanUpdate {
  Vector mean;
  Matrix covariance;
};

KalmanUpdate linear_update(const Vector& mean, const Matrix& cov, const Vector& measurement, const Vector& predicted,
                           const Matrix& C, const Matrix& measurement_cov) {
  const Matrix pht = cov * C.transpose();
  const auto llt = factor_innovation(C * pht + measurement_cov);
  const Matrix gain = llt.solve(pht.transpose()).transpose();
  return {mean + gain * (measurement - predicted), symmetrize(cov - gain * pht.transpose())};
}

}  // namespace

SigmaPoints sigma_points(const Vector& mean, const Matrix& covariance, const UkfParams& params) {
  const auto n = static_cast<double>(mean.size());
  const double kappa = params.kappa.value_or(3.0 - n);
  const double lambda = params.alpha * params.alpha * (n + kappa) - n;
  if (!(n + lambda > 0.0)) throw ContractViolation("sigma_points: n + lambda must be positive");

  Eigen::LLT<Matrix> llt((n + lambda) * covariance);
  if (llt.info() != Eigen::Success) {
    Matrix jittered = (n + lambda) * covariance;
    jittered.diagonal().array() += 1e-9 * std::max(jittered.trace() / n, 1e-300);
    llt.compute(jittered);
    if (llt.info() != Eigen::Success) throw FactorizationError("sigma_points: covariance is not positive definite");
  }
  const Matrix root = llt.matrixL();

  SigmaPoints sp;
  const auto dim = mean.size();
  sp.points.resize(dim, 2 * dim + 1);
  sp.points.col(0) = mean;
  for (Eigen::Index i = 0; i < dim; ++i) {
    sp.points.col(1 + i) = mean + root.col(i);
    sp.points.col(1 + dim + i) = mean - root.col(i);
  }
  const double wi = 0.5 / (n + lambda);
  sp.mean_weights.assign(static_cast<std::size_t>(2 * dim + 1), wi);
  sp.cov_weights.assign(static_cast<std::size_t>(2 * dim + 1), wi);
  sp.mean_weights[0] = lambda / (n + lambda);
  sp.cov_weights[0] = sp.mean_weights[0] + (1.0 - params.alpha * params.alpha + params.beta);
  return sp;
}

UkfState ukf_init(const StateSpaceModel& model, const UkfParams& params) {
  model.validate();
  UkfState state;
  state.mean = model.mu1;
  state.covariance = model.P1;
  state.params = params;
  return state;
}

UkfState ukf_correct(UkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                     const UniformQuantizer& q) {
  const SigmaPoints sp = sigma_points(state.mean, state.covariance, state.params);
  const auto count = sp.points.cols();
  const Vector du = model.D * u;
  Matrix outputs(model.p(), count);
  for (Eigen::Index i = 0; i < count; ++i) outputs.col(i) = quantize(model.C * sp.points.col(i) + du, q);

  Vector y_hat = Vector::Zero(model.p());
  for (Eigen::Index i = 0; i < count; ++i) y_hat += sp.mean_weights[static_cast<std::size_t>(i)] * outputs.col(i);
  Matrix pyy = model.R;
  Matrix pxy = Matrix::Zero(model.n(), model.p());
  for (Eigen::Index i = 0; i < count; ++i) {
    const double wc = sp.cov_weights[static_cast<std::size_t>(i)];
    const Vector dy = outputs.col(i) - y_hat;
    pyy += wc * dy * dy.transpose();
    pxy += wc * (sp.points.col(i) - state.mean) * dy.transpose();
  }
  const auto llt = factor_innovation(symmetrize(pyy));
  const Matrix gain = llt.solve(pxy.transpose()).transpose();
  state.mean = state.mean + gain * (y - y_hat);
  state.covariance = symmetrize(state.covariance - gain * pyy * gain.transpose());
  state.filtered = {state.mean, state.covariance};
  return state;
}

UkfState ukf_predict(UkfState state, const Vector& u, const StateSpaceModel& model) {
  const SigmaPoints sp = sigma_points(state.mean, state.covariance, state.params);
  const auto count = sp.points.cols();
  const Matrix propagated = (model.A * sp.points).colwise() + model.B * u;
  Vector mean = Vector::Zero(model.n());
  for (Eigen::Index i = 0; i < count; ++i) mean += sp.mean_weights[static_cast<std::size_t>(i)] * propagated.col(i);
  Matrix cov = model.Q;
  for (Eigen::Index i = 0; i < count; ++i) {
    const Vector d = propagated.col(i) - mean;
    cov += sp.cov_weights[static_cast<std::size_t>(i)] * d * d.transpose();
  }
  state.mean = std::move(mean);
  state.covariance = symmetrize(cov);
  ++state.t;
  return state;
}

UkfState ukf_step(UkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q) {
  return ukf_predict(ukf_correct(std::move(state), y, u, model, q), u, model);
}

Matrix qkf_measurement_covariance(const StateSpaceModel& model, const UniformQuantizer& q) {
  if (q.dim() != model.p()) throw ContractViolation("qkf: quantizer dimension does not match outputs");
  Matrix r = model.R;
  r.diagonal() += q.step().cwiseAbs2() / 12.0;
  return r;
}

QkfState qkf_init(const StateSpaceModel& model) {
  model.validate();
  return QkfState{model.mu1, model.P1, 0, {}};
}

QkfState qkf_correct(QkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                     const UniformQuantizer& q) {
  auto update = linear_update(state.mean, state.covariance, y, model.C * state.mean + model.D * u, model.C,
                              qkf_measurement_covariance(model, q));
  state.mean = std::move(update.mean);
  state.covariance = std::move(update.covariance);
  state.filtered = {state.mean, state.covariance};
  return state;
}

QkfState qkf_predict(QkfState state, const Vector& u, const StateSpaceModel& model) {
  state.mean = model.A * state.mean + model.B * u;
  state.covariance = symmetrize(model.A * state.covariance * model.A.transpose() + model.Q);
  ++state.t;
  return state;
}

QkfState qkf_step(QkfState state, const Vector& y, const Vector& u, const StateSpaceModel& model,
                  const UniformQuantizer& q) {
  return qkf_predict(qkf_correct(std::move(state), y, u, model, q), u, model);
}

QkfState kalman_step(QkfState state, const Vector& z, const Vector& u, const StateSpaceModel& model,
                     const Matrix& measurement_covariance) {
  auto update = linear_update(state.mean, state.covariance, z, model.C * state.mean + model.D * u, model.C,
                              measurement_covariance);
  state.mean = std::move(update.mean);
  state.covariance = std::move(update.covariance);
  state.filtered = {state.mean, state.covariance};
  return qkf_predict(std::move(state), u, model);
}

}  // namespace qgsf
