#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "qgsf/system_model.hpp"

using namespace qgsf;

namespace {

Vector v1(double a) { return Vector::Constant(1, a); }

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

// Independent oracle: extended-precision erfc.
long double log_phi_oracle(long double x) { return std::log(0.5L * std::erfc(-x / std::sqrt(2.0L))); }

double simpson_normal_mass(double a, double b, double mean, double var) {
  const int n = 200000;
  const double h = (b - a) / n;
  auto f = [&](double z) { return std::exp(-0.5 * (z - mean) * (z - mean) / var) / std::sqrt(2 * M_PI * var); };
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 == 1 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

StateSpaceModel noise_free_scalar() {
  StateSpaceModel m = scenario_siso().model;
  m.Q = Matrix::Zero(1, 1);
  m.R = Matrix::Zero(1, 1);
  m.P1 = Matrix::Zero(1, 1);
  m.mu1 = v1(1.0);
  return m;
}

}  // namespace

TEST(Quantize, NearestMultiple) {
  const auto q = UniformQuantizer::uniform(1, 10.0);
  EXPECT_EQ(quantize(v1(3.0), q)(0), 0.0);
  EXPECT_EQ(quantize(v1(7.0), q)(0), 10.0);
  EXPECT_EQ(quantize(v1(-7.0), q)(0), -10.0);
}

TEST(Quantize, HalfwayGoesUp) {
  const auto q = UniformQuantizer::uniform(1, 10.0);
  EXPECT_EQ(quantize(v1(5.0), q)(0), 10.0);
  EXPECT_EQ(quantize(v1(-5.0), q)(0), 0.0);
  EXPECT_EQ(quantize(v1(15.0), q)(0), 20.0);
}

TEST(Quantize, VectorOutput) {
  const auto y = quantize(v2(10.4, -3.6), UniformQuantizer::uniform(2, 7.0));
  EXPECT_EQ(y(0), 7.0);
  EXPECT_EQ(y(1), -7.0);
}

TEST(Quantize, DimensionMismatch) {
  EXPECT_THROW(quantize(v1(0.0), UniformQuantizer::uniform(2, 1.0)), ContractViolation);
}

TEST(Quantizer, RejectsNonPositiveStep) {
  EXPECT_THROW(UniformQuantizer::uniform(1, 0.0), ContractViolation);
  EXPECT_THROW(UniformQuantizer(v2(1.0, -1.0)), ContractViolation);
}

TEST(RegionBounds, Cells) {
  const auto b1 = region_bounds(v1(0.0), UniformQuantizer::uniform(1, 10.0));
  EXPECT_EQ(b1[0].first, -5.0);
  EXPECT_EQ(b1[0].second, 5.0);
  const auto b2 = region_bounds(v2(7.0, 0.0), UniformQuantizer::uniform(2, 7.0));
  EXPECT_EQ(b2[0].first, 3.5);
  EXPECT_EQ(b2[0].second, 10.5);
  EXPECT_EQ(b2[1].first, -3.5);
  EXPECT_EQ(b2[1].second, 3.5);
}

TEST(RegionBounds, OffLatticeIsRejected) {
  EXPECT_THROW(region_bounds(v1(3.0), UniformQuantizer::uniform(1, 10.0)), ContractViolation);
  EXPECT_NO_THROW(region_bounds(v1(70.0 + 1e-12), UniformQuantizer::uniform(1, 10.0)));
}

TEST(RegionBounds, DualityWithQuantize) {
  std::mt19937_64 rng(12);
  for (double step : {1.0, 7.0, 10.0}) {
    const auto q = UniformQuantizer::uniform(2, step);
    std::uniform_real_distribution<double> u(-50.0 * step, 50.0 * step);
    for (int i = 0; i < 100000; ++i) {
      const Vector z = v2(u(rng), u(rng));
      const auto b = region_bounds(quantize(z, q), q);
      for (int j = 0; j < 2; ++j) {
        ASSERT_LE(b[j].first, z(j));
        ASSERT_LT(z(j), b[j].second);
      }
    }
    // Exact boundaries belong to the upper cell.
    for (int k = -5; k <= 5; ++k) {
      const double edge = (k + 0.5) * step;
      const auto b = region_bounds(quantize(v2(edge, edge), q), q);
      EXPECT_EQ(b[0].first, edge);
    }
  }
}

TEST(Model, ValidateCatchesBadDimensionsAndCovariances) {
  auto m = scenario_mimo().model;
  EXPECT_NO_THROW(m.validate());
  auto bad = m;
  bad.B = Matrix::Zero(3, 2);
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = m;
  bad.Q(0, 0) = -1.0;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = m;
  bad.R(0, 1) = 0.5;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = m;
  bad.mu1 = v1(0.0);
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(Model, ScenarioValues) {
  const auto s1 = scenario_siso();
  EXPECT_EQ(s1.model.A(0, 0), 0.8);
  EXPECT_EQ(s1.model.B(0, 0), 1.5);
  EXPECT_EQ(s1.model.C(0, 0), 2.8);
  EXPECT_EQ(s1.model.D(0, 0), 1.8);
  EXPECT_EQ(s1.model.Q(0, 0), 1.0);
  EXPECT_EQ(s1.model.R(0, 0), 0.1);
  EXPECT_EQ(s1.model.mu1(0), 1.0);
  EXPECT_EQ(s1.model.P1(0, 0), 2.0);
  EXPECT_EQ(s1.quantizer.step()(0), 10.0);
  EXPECT_EQ(s1.inputs.covariance(0, 0), 2.0);
  const auto s2 = scenario_mimo();
  EXPECT_EQ(s2.model.n(), 2);
  EXPECT_EQ(s2.model.p(), 2);
  EXPECT_EQ(s2.quantizer.step()(1), 7.0);
  EXPECT_EQ(s2.model.P1(1, 1), 0.01);
  EXPECT_EQ(s2.inputs.mean(1), 2.0);
}

TEST(Simulate, NoiseFreeMatchesClosedForm) {
  const auto m = noise_free_scalar();
  const std::vector<Vector> inputs(30, v1(0.0));
  const auto traj = simulate(m, UniformQuantizer::uniform(1, 10.0), inputs, 1);
  ASSERT_EQ(traj.length(), 30U);
  for (std::size_t t = 0; t < traj.length(); ++t) {
    const double x = std::pow(0.8, static_cast<double>(t));
    EXPECT_NEAR(traj.x[t](0), x, 1e-12 * x);
    EXPECT_NEAR(traj.z[t](0), 2.8 * x, 1e-12 * 2.8 * x);
    EXPECT_EQ(traj.y[t], quantize(traj.z[t], UniformQuantizer::uniform(1, 10.0)));
  }
}

TEST(Simulate, SameSeedSameTrajectory) {
  const auto s = scenario_mimo();
  const auto a = simulate(s.model, s.quantizer, s.inputs, 50, 77);
  const auto b = simulate(s.model, s.quantizer, s.inputs, 50, 77);
  const auto c = simulate(s.model, s.quantizer, s.inputs, 50, 78);
  for (std::size_t t = 0; t < 50; ++t) {
    EXPECT_EQ(a.x[t], b.x[t]);
    EXPECT_EQ(a.y[t], b.y[t]);
    EXPECT_EQ(a.u[t], b.u[t]);
  }
  EXPECT_NE(a.x[10], c.x[10]);
}

TEST(Simulate, OutputsAreQuantizedStates) {
  const auto s = scenario_mimo();
  const auto traj = simulate(s.model, s.quantizer, s.inputs, 100, 3);
  for (std::size_t t = 0; t < traj.length(); ++t) EXPECT_EQ(traj.y[t], quantize(traj.z[t], s.quantizer));
}

TEST(Simulate, StationaryVarianceOfScalarExample) {
  // x_{t+1} = 0.8 x + 1.5 u + w with var(u)=2, var(w)=1 -> var(x) = 5.5 / 0.36.
  const auto s = scenario_siso();
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto traj = simulate(s.model, s.quantizer, s.inputs, 200, seed);
    for (std::size_t t = 50; t < traj.length(); ++t) {
      sum += traj.x[t](0);
      sum_sq += traj.x[t](0) * traj.x[t](0);
      ++count;
    }
  }
  const double mean = sum / count;
  const double var = sum_sq / count - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.1);
  EXPECT_NEAR(var, 5.5 / 0.36, 0.05 * 5.5 / 0.36);
}

TEST(Simulate, ExplicitInputsAreStored) {
  const auto s = scenario_siso();
  std::vector<Vector> inputs;
  for (int t = 0; t < 5; ++t) inputs.push_back(v1(t));
  const auto traj = simulate(s.model, s.quantizer, inputs, 2);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(traj.u[t](0), t);
}

TEST(LogNormalCdf, MatchesExtendedPrecisionOracle) {
  for (double x : {-200.0, -60.0, -38.5, -30.0, -20.0, -8.0, -1.0, 0.0, 0.5, 3.0, 8.0, 12.0}) {
    const long double expected = log_phi_oracle(x);
    EXPECT_NEAR(log_normal_cdf(x), static_cast<double>(expected), 1e-12 * std::max(1.0L, std::abs(expected))) << x;
  }
}

TEST(LogNormalInterval, TailsAndCancellation) {
  auto oracle = [](long double lo, long double hi) {
    const long double s = std::sqrt(2.0L);
    if (lo > 0) return std::log(0.5L * (std::erfc(lo / s) - std::erfc(hi / s)));
    return std::log(0.5L * (std::erfc(-hi / s) - std::erfc(-lo / s)));
  };
  const double cases[][2] = {{-1, 1}, {-40, -35}, {35, 40}, {30, 30.5}, {-30.5, -30}, {2, 2.0001}, {-5, 60}, {0, 1e-8}};
  for (const auto& c : cases) {
    const long double expected = oracle(c[0], c[1]);
    EXPECT_NEAR(log_normal_interval(c[0], c[1]), static_cast<double>(expected),
                1e-10 * std::max(1.0L, std::abs(expected)))
        << c[0] << " " << c[1];
  }
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(log_normal_interval(-inf, inf), 0.0);
  EXPECT_NEAR(log_normal_interval(-inf, 0.0), std::log(0.5), 1e-15);
  EXPECT_NEAR(log_normal_interval(0.0, inf), std::log(0.5), 1e-15);
}

TEST(ExactRegionLoglik, CellCoversThePrediction) {
  const auto s = scenario_siso();
  EXPECT_NEAR(exact_region_loglik(v1(0.0), v1(0.0), v1(0.0), s.model, s.quantizer), 0.0, 1e-12);
}

TEST(ExactRegionLoglik, MatchesQuadrature) {
  const auto s = scenario_siso();
  const double ll = exact_region_loglik(v1(0.0), v1(1.5), v1(0.0), s.model, s.quantizer);
  const double mass = simpson_normal_mass(-5.0, 5.0, 4.2, 0.1);
  EXPECT_NEAR(std::exp(ll), mass, 1e-10);
}

TEST(ExactRegionLoglik, IndependentChannelsAdd) {
  auto m = scenario_mimo().model;
  const auto q = scenario_mimo().quantizer;
  const Vector x = v2(0.3, -1.1), u = v2(0.5, 0.2);
  const Vector c = m.C * x + m.D * u;
  const Vector y = v2(0.0, 7.0);
  const double joint = exact_region_loglik(y, x, u, m, q);
  const double sd = std::sqrt(0.1);
  const double sep = log_normal_interval((-3.5 - c(0)) / sd, (3.5 - c(0)) / sd) +
                     log_normal_interval((3.5 - c(1)) / sd, (10.5 - c(1)) / sd);
  EXPECT_NEAR(joint, sep, 1e-12);
}

TEST(ExactRegionLoglik, ProbabilitiesOverLatticeSumToOne) {
  auto m = scenario_siso().model;
  const auto q = UniformQuantizer::uniform(1, 0.05);
  const double c = 2.8 * 0.37;
  const double sd = std::sqrt(0.1);
  double total = 0.0;
  const int lo = static_cast<int>(std::floor((c - 8.5 * sd) / 0.05));
  const int hi = static_cast<int>(std::ceil((c + 8.5 * sd) / 0.05));
  for (int k = lo; k <= hi; ++k) total += std::exp(exact_region_loglik(v1(k * 0.05), v1(0.37), v1(0.0), m, q));
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(ExactRegionLoglik, FarTailStaysFinite) {
  const auto s = scenario_siso();
  const double ll = exact_region_loglik(v1(100.0), v1(0.0), v1(0.0), s.model, s.quantizer);
  EXPECT_TRUE(std::isfinite(ll));
  EXPECT_LT(ll, -1000.0);
}

TEST(ExactRegionLoglik, CorrelatedNoiseIsUnsupported) {
  auto m = scenario_mimo().model;
  m.R(0, 1) = m.R(1, 0) = 0.01;
  EXPECT_THROW(exact_region_loglik(v2(0, 0), v2(0, 0), v2(0, 0), m, scenario_mimo().quantizer),
               UnsupportedConfiguration);
}

TEST(PsdFactor, ReconstructsSingularCovariance) {
  Matrix cov(2, 2);
  cov << 1.0, 1.0, 1.0, 1.0;
  const Matrix l = psd_factor(cov);
  EXPECT_LT((l * l.transpose() - cov).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(psd_factor(Matrix::Zero(2, 2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(TrajectoryCsv, RoundTrip) {
  const auto s = scenario_mimo();
  const auto traj = simulate(s.model, s.quantizer, s.inputs, 25, 4);
  const auto path = std::filesystem::temp_directory_path() / "qgsf_test_traj.csv";
  write_trajectory_csv(traj, path);
  const auto back = read_trajectory_csv(path);
  ASSERT_EQ(back.length(), traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t) {
    EXPECT_EQ(back.x[t], traj.x[t]);
    EXPECT_EQ(back.z[t], traj.z[t]);
    EXPECT_EQ(back.y[t], traj.y[t]);
    EXPECT_EQ(back.u[t], traj.u[t]);
  }
  std::filesystem::remove(path);
}
