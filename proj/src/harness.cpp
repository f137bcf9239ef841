#include "qgsf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include <fmt/format.h>

namespace qgsf {

std::string filter_name(FilterKind kind) {
  switch (kind) {
    case FilterKind::Gsf: return "gsf";
    case FilterKind::Pf: return "pf";
    case FilterKind::Ukf: return "ukf";
    case FilterKind::Qkf: return "qkf";
  }
  return "unknown";
}

FilterKind parse_filter(const std::string& name) {
  if (name == "gsf") return FilterKind::Gsf;
  if (name == "pf") return FilterKind::Pf;
  if (name == "ukf") return FilterKind::Ukf;
  if (name == "qkf") return FilterKind::Qkf;
  throw ConfigError("unknown filter '" + name + "' (expected gsf, pf, ukf or qkf)");
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (runs < 1) throw ConfigError("runs must be at least 1");
  if (horizon < 1) throw ConfigError("horizon must be at least 1");
  if (filters.empty()) throw ConfigError("no filters selected");
  if (particles < 1 || gt_particles < 1) throw ConfigError("particle counts must be positive");
  if (!(resample_threshold >= 0.0 && resample_threshold <= 1.0)) {
    throw ConfigError("resample_threshold must lie in [0, 1]");
  }
  if (gsf.reduction_cap < 1) throw ConfigError("gsf.reduction_cap must be at least 1");
  if (!(gsf.alpha >= 0.0)) throw ConfigError("gsf.alpha must be nonnegative");
  if (indicator.k1 < 1) throw ConfigError("indicator.K1 must be at least 1");
  if (!indicator.model_path && indicator.train_samples < 10 * static_cast<std::size_t>(indicator.k1)) {
    throw ConfigError("indicator.train_samples must be at least 10*K1");
  }
  for (std::size_t s : pdf_steps) {
    if (s < 1 || s > horizon) throw ConfigError(fmt::format("pdf step {} is outside 1..{}", s, horizon));
  }
  try {
    scenario.model.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  if (scenario.quantizer.dim() != scenario.model.p()) throw ConfigError("quantizer step count must equal p");
  if (scenario.inputs.mean.size() != scenario.model.m() || scenario.inputs.covariance.rows() != scenario.model.m() ||
      scenario.inputs.covariance.cols() != scenario.model.m()) {
    throw ConfigError("input process dimensions must equal m");
  }
  if (scenario.model.n() + ukf.alpha * ukf.alpha * (scenario.model.n() + ukf.kappa.value_or(3.0 - scenario.model.n())) -
          scenario.model.n() <=
      0.0) {
    throw ConfigError("UKF parameters give a non-positive sigma-point spread");
  }
}

std::size_t ExperimentConfig::bins_per_axis() const {
  if (pdf_bins > 0) return pdf_bins;
  return scenario.model.n() == 1 ? 100 : 30;
}

namespace {

using nlohmann::json;

Matrix matrix_from_json(const json& j, const std::string& field) {
  if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError("field '" + field + "' must be a number or nested array");
  const auto rows = j.size();
  const auto cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0) throw ConfigError("field '" + field + "' must be a nested array of rows");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError("field '" + field + "' has ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw ConfigError("field '" + field + "' has a non-numeric entry");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

Vector vector_from_json(const json& j, const std::string& field) {
  if (j.is_number()) return Vector::Constant(1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError("field '" + field + "' must be a number or array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("field '" + field + "' has a non-numeric entry");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("field '{}' in {} has the wrong type", key, where));
  }
}

Scenario scenario_from_json(const json& j) {
  check_keys(j, "scenario", {"A", "B", "C", "D", "Q", "R", "mu1", "P1", "step", "input_mean", "input_covariance"});
  for (const char* key : {"A", "B", "C", "D", "Q", "R", "mu1", "P1", "step", "input_mean", "input_covariance"}) {
    if (!j.contains(key)) throw ConfigError(std::string("scenario is missing '") + key + "'");
  }
  StateSpaceModel model;
  model.A = matrix_from_json(j["A"], "A");
  model.B = matrix_from_json(j["B"], "B");
  model.C = matrix_from_json(j["C"], "C");
  model.D = matrix_from_json(j["D"], "D");
  model.Q = matrix_from_json(j["Q"], "Q");
  model.R = matrix_from_json(j["R"], "R");
  model.mu1 = vector_from_json(j["mu1"], "mu1");
  model.P1 = matrix_from_json(j["P1"], "P1");
  Vector step = vector_from_json(j["step"], "step");
  if (step.size() == 1 && model.C.rows() > 1) step = Vector::Constant(model.C.rows(), step(0));
  try {
    return Scenario{model, UniformQuantizer(step),
                    {vector_from_json(j["input_mean"], "input_mean"),
                     matrix_from_json(j["input_covariance"], "input_covariance")}};
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

json scenario_to_json(const Scenario& s) {
  return json{{"A", matrix_to_json(s.model.A)},
              {"B", matrix_to_json(s.model.B)},
              {"C", matrix_to_json(s.model.C)},
              {"D", matrix_to_json(s.model.D)},
              {"Q", matrix_to_json(s.model.Q)},
              {"R", matrix_to_json(s.model.R)},
              {"mu1", vector_to_json(s.model.mu1)},
              {"P1", matrix_to_json(s.model.P1)},
              {"step", vector_to_json(s.quantizer.step())},
              {"input_mean", vector_to_json(s.inputs.mean)},
              {"input_covariance", matrix_to_json(s.inputs.covariance)}};
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  check_keys(j, "config", {"name", "scenario", "filters", "horizon", "runs", "seed", "gsf", "indicator", "pf",
                           "ground_truth", "ukf", "pdf", "threads", "output_dir"});
  ExperimentConfig c;
  if (j.contains("name")) c.name = get_as<std::string>(j, "name", "config");
  if (j.contains("scenario")) {
    const auto& s = j["scenario"];
    if (s.is_string()) {
      c.scenario_name = s.get<std::string>();
      if (c.scenario_name == "siso") {
        c.scenario = scenario_siso();
      } else if (c.scenario_name == "mimo") {
        c.scenario = scenario_mimo();
      } else {
        throw ConfigError("unknown scenario '" + c.scenario_name + "' (expected siso, mimo or an object)");
      }
    } else {
      c.scenario_name = "custom";
      c.scenario = scenario_from_json(s);
    }
  }
  if (j.contains("filters")) {
    if (!j["filters"].is_array()) throw ConfigError("'filters' must be an array of names");
    c.filters.clear();
    std::set<std::string> seen;
    for (const auto& f : j["filters"]) {
      if (!f.is_string()) throw ConfigError("'filters' must be an array of names");
      if (!seen.insert(f.get<std::string>()).second) throw ConfigError("filter listed twice: " + f.get<std::string>());
      c.filters.push_back(parse_filter(f.get<std::string>()));
    }
  }
  if (j.contains("horizon")) c.horizon = get_as<std::size_t>(j, "horizon", "config");
  if (j.contains("runs")) c.runs = get_as<std::size_t>(j, "runs", "config");
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed", "config");
  if (j.contains("threads")) c.threads = get_as<std::size_t>(j, "threads", "config");
  if (j.contains("output_dir")) c.output_dir = get_as<std::string>(j, "output_dir", "config");
  if (j.contains("gsf")) {
    const auto& g = j["gsf"];
    check_keys(g, "gsf", {"reduction_cap", "alpha", "indicator_components"});
    if (g.contains("reduction_cap")) c.gsf.reduction_cap = get_as<std::size_t>(g, "reduction_cap", "gsf");
    if (g.contains("alpha")) c.gsf.alpha = get_as<double>(g, "alpha", "gsf");
    if (g.contains("indicator_components")) {
      c.gsf.indicator_components = get_as<std::size_t>(g, "indicator_components", "gsf");
    }
  }
  if (j.contains("indicator")) {
    const auto& i = j["indicator"];
    check_keys(i, "indicator", {"model", "K1", "train_samples", "train_seed", "max_iter", "tol"});
    if (i.contains("model") && !i["model"].is_null()) c.indicator.model_path = get_as<std::string>(i, "model", "indicator");
    if (i.contains("K1")) c.indicator.k1 = get_as<int>(i, "K1", "indicator");
    if (i.contains("train_samples")) c.indicator.train_samples = get_as<std::size_t>(i, "train_samples", "indicator");
    if (i.contains("train_seed")) c.indicator.train_seed = get_as<std::uint64_t>(i, "train_seed", "indicator");
    if (i.contains("max_iter")) c.indicator.em.max_iter = get_as<int>(i, "max_iter", "indicator");
    if (i.contains("tol")) c.indicator.em.tol = get_as<double>(i, "tol", "indicator");
  }
  if (j.contains("pf")) {
    const auto& p = j["pf"];
    check_keys(p, "pf", {"particles", "resample_threshold"});
    if (p.contains("particles")) c.particles = get_as<std::size_t>(p, "particles", "pf");
    if (p.contains("resample_threshold")) c.resample_threshold = get_as<double>(p, "resample_threshold", "pf");
  }
  if (j.contains("ground_truth")) {
    const auto& g = j["ground_truth"];
    check_keys(g, "ground_truth", {"particles"});
    if (g.contains("particles")) c.gt_particles = get_as<std::size_t>(g, "particles", "ground_truth");
  }
  if (j.contains("ukf")) {
    const auto& u = j["ukf"];
    check_keys(u, "ukf", {"alpha", "beta", "kappa"});
    if (u.contains("alpha")) c.ukf.alpha = get_as<double>(u, "alpha", "ukf");
    if (u.contains("beta")) c.ukf.beta = get_as<double>(u, "beta", "ukf");
    if (u.contains("kappa") && !u["kappa"].is_null()) c.ukf.kappa = get_as<double>(u, "kappa", "ukf");
  }
  if (j.contains("pdf")) {
    const auto& p = j["pdf"];
    check_keys(p, "pdf", {"steps", "bins"});
    if (p.contains("steps")) c.pdf_steps = get_as<std::vector<std::size_t>>(p, "steps", "pdf");
    if (p.contains("bins")) c.pdf_bins = get_as<std::size_t>(p, "bins", "pdf");
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json filters = json::array();
  for (auto f : c.filters) filters.push_back(filter_name(f));
  json indicator{{"K1", c.indicator.k1},
                 {"train_samples", c.indicator.train_samples},
                 {"train_seed", c.indicator.train_seed},
                 {"max_iter", c.indicator.em.max_iter},
                 {"tol", c.indicator.em.tol}};
  indicator["model"] = c.indicator.model_path ? json(c.indicator.model_path->string()) : json(nullptr);
  json ukf{{"alpha", c.ukf.alpha}, {"beta", c.ukf.beta}};
  ukf["kappa"] = c.ukf.kappa ? json(*c.ukf.kappa) : json(nullptr);
  json out{{"name", c.name},
           {"filters", filters},
           {"horizon", c.horizon},
           {"runs", c.runs},
           {"seed", c.seed},
           {"gsf",
            {{"reduction_cap", c.gsf.reduction_cap},
             {"alpha", c.gsf.alpha},
             {"indicator_components", c.gsf.indicator_components}}},
           {"indicator", indicator},
           {"pf", {{"particles", c.particles}, {"resample_threshold", c.resample_threshold}}},
           {"ground_truth", {{"particles", c.gt_particles}}},
           {"ukf", ukf},
           {"pdf", {{"steps", c.pdf_steps}, {"bins", c.pdf_bins}}},
           {"threads", c.threads},
           {"output_dir", c.output_dir.string()}};
  if (c.scenario_name == "custom") {
    out["scenario"] = scenario_to_json(c.scenario);
  } else {
    out["scenario"] = c.scenario_name;
  }
  return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t run, std::uint64_t stream) {
  // splitmix64 finalizer over a mix of the three inputs
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ run) ^ (stream * 0xd1b54a32d192ed03ULL));
}

UnitIntervalGmm resolve_indicator_model(const IndicatorSource& source) {
  if (source.model_path) {
    auto model = load_model(*source.model_path);
    if (static_cast<int>(model.size()) != source.k1) {
      throw ConfigError(fmt::format("indicator model {} has {} components but K1 = {}", source.model_path->string(),
                                    model.size(), source.k1));
    }
    return model;
  }
  return train_unit_gmm(source.train_samples, source.k1, source.train_seed, source.em);
}

bool MCSummary::degenerate_only() const {
  for (auto f : filters) {
    bool any_ok = false;
    for (const auto& r : records) {
      if (r.filter == f && r.ok) any_ok = true;
    }
    if (!any_ok) return true;
  }
  return false;
}

std::vector<double> mean_squared_error(std::span<const Vector> estimates, std::span<const Vector> truth) {
  if (estimates.size() != truth.size() || truth.empty()) throw ContractViolation("mse: length mismatch");
  const auto n = truth.front().size();
  std::vector<double> mse(static_cast<std::size_t>(n), 0.0);
  for (std::size_t t = 0; t < truth.size(); ++t) {
    for (Eigen::Index d = 0; d < n; ++d) {
      const double e = estimates[t](d) - truth[t](d);
      mse[static_cast<std::size_t>(d)] += e * e;
    }
  }
  for (double& v : mse) v /= static_cast<double>(truth.size());
  return mse;
}

RunRecord run_filter(FilterKind kind, const ExperimentConfig& config, const Trajectory& traj,
                     std::shared_ptr<const IndicatorTemplate> indicator, std::size_t run) {
  const auto& model = config.scenario.model;
  const auto& q = config.scenario.quantizer;
  RunRecord rec;
  rec.run = run;
  rec.filter = kind;
  rec.estimates.reserve(traj.length());

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  try {
    switch (kind) {
      case FilterKind::Gsf: {
        auto s = gsf_init(model, std::move(indicator), config.gsf);
        for (std::size_t t = 0; t < traj.length(); ++t) {
          s = gsf_step(std::move(s), traj.y[t], traj.u[t], model, q);
          rec.estimates.push_back(s.filtered.mean);
        }
        break;
      }
      case FilterKind::Pf: {
        auto s = pf_init(model, config.particles, derive_seed(config.seed, run, streams::kParticle),
                         config.resample_threshold);
        for (std::size_t t = 0; t < traj.length(); ++t) {
          s = pf_step(std::move(s), traj.y[t], traj.u[t], model, q);
          rec.estimates.push_back(s.filtered.mean);
        }
        break;
      }
      case FilterKind::Ukf: {
        auto s = ukf_init(model, config.ukf);
        for (std::size_t t = 0; t < traj.length(); ++t) {
          s = ukf_step(std::move(s), traj.y[t], traj.u[t], model, q);
          rec.estimates.push_back(s.filtered.mean);
        }
        break;
      }
      case FilterKind::Qkf: {
        auto s = qkf_init(model);
        for (std::size_t t = 0; t < traj.length(); ++t) {
          s = qkf_step(std::move(s), traj.y[t], traj.u[t], model, q);
          rec.estimates.push_back(s.filtered.mean);
        }
        break;
      }
    }
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(clock::now() - start).count();
  if (rec.ok) {
    rec.mse = mean_squared_error(rec.estimates, traj.x);
    for (double v : rec.mse) {
      if (!std::isfinite(v)) {
        rec.ok = false;
        rec.error = "non-finite estimate";
      }
    }
  }
  return rec;
}

namespace {

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

MCSummary run_experiment(const ExperimentConfig& config, const UnitIntervalGmm& base) {
  config.validate();
  const auto& sc = config.scenario;
  const auto indicator = make_indicator_template(base, sc.model.p(), config.gsf);

  MCSummary summary;
  summary.config = config_to_json(config);
  summary.filters = config.filters;
  summary.state_dim = sc.model.n();
  summary.horizon = config.horizon;
  summary.truth.resize(config.runs);
  std::vector<std::vector<RunRecord>> per_run(config.runs);

  parallel_for(config.runs, config.threads, [&](std::size_t run) {
    const Trajectory traj = simulate(sc.model, sc.quantizer, sc.inputs, config.horizon,
                                     derive_seed(config.seed, run, streams::kTrajectory));
    for (auto kind : config.filters) per_run[run].push_back(run_filter(kind, config, traj, indicator, run));
    summary.truth[run] = traj.x;
  });
  for (auto& recs : per_run) {
    for (auto& r : recs) summary.records.push_back(std::move(r));
  }
  return summary;
}

// ---------------------------------------------------------------------------
// PDF comparison
// ---------------------------------------------------------------------------

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ContractViolation("total_variation: size mismatch");
  double tv = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

namespace {

struct Histogram {
  std::vector<GridAxis> edges;  // lower/upper are outer edges, points = cell count
  std::vector<std::vector<double>> centers;
  double cell_volume = 1.0;
  std::size_t cells = 1;
};

Histogram make_histogram(const Estimate& reference, std::size_t bins) {
  Histogram h;
  const auto n = reference.mean.size();
  for (Eigen::Index d = 0; d < n; ++d) {
    const double sd = std::sqrt(std::max(reference.covariance(d, d), 1e-12));
    const double lo = reference.mean(d) - 6.0 * sd;
    const double hi = reference.mean(d) + 6.0 * sd;
    const double width = (hi - lo) / static_cast<double>(bins);
    h.edges.push_back({lo, hi, bins});
    std::vector<double> c(bins);
    for (std::size_t i = 0; i < bins; ++i) c[i] = lo + (static_cast<double>(i) + 0.5) * width;
    h.centers.push_back(std::move(c));
    h.cell_volume *= width;
    h.cells *= bins;
  }
  return h;
}

Vector cell_center(const Histogram& h, std::size_t flat) {
  const auto n = h.edges.size();
  Vector x(static_cast<Eigen::Index>(n));
  for (std::size_t d = n; d-- > 0;) {
    const std::size_t bins = h.edges[d].points;
    x(static_cast<Eigen::Index>(d)) = h.centers[d][flat % bins];
    flat /= bins;
  }
  return x;
}

std::vector<double> particle_histogram(const Histogram& h, const PfState& pf) {
  std::vector<double> probs(h.cells, 0.0);
  const auto w = pf.normalized_weights();
  for (Eigen::Index i = 0; i < pf.particles.cols(); ++i) {
    std::size_t flat = 0;
    bool inside = true;
    for (std::size_t d = 0; d < h.edges.size(); ++d) {
      const auto& e = h.edges[d];
      const double s = (pf.particles(static_cast<Eigen::Index>(d), i) - e.lower) / (e.upper - e.lower) *
                       static_cast<double>(e.points);
      if (s < 0.0 || s >= static_cast<double>(e.points)) {
        inside = false;
        break;
      }
      flat = flat * e.points + static_cast<std::size_t>(s);
    }
    if (inside) probs[flat] += w[static_cast<std::size_t>(i)];
  }
  return probs;
}

}  // namespace

std::vector<PdfRecord> compare_pdfs(const ExperimentConfig& config, const UnitIntervalGmm& base,
                                    std::span<const std::size_t> steps) {
  config.validate();
  const auto& sc = config.scenario;
  const auto& model = sc.model;
  if (model.n() > 2) throw UnsupportedConfiguration("PDF comparison supports one or two states");
  for (std::size_t s : steps) {
    if (s < 1 || s > config.horizon) throw ConfigError(fmt::format("pdf step {} is outside 1..{}", s, config.horizon));
  }
  const std::set<std::size_t> wanted(steps.begin(), steps.end());
  const std::size_t last = wanted.empty() ? 0 : *wanted.rbegin();
  std::vector<PdfRecord> out;
  if (last == 0) return out;

  const Trajectory traj =
      simulate(model, sc.quantizer, sc.inputs, config.horizon, derive_seed(config.seed, 0, streams::kTrajectory));
  auto gsf = gsf_init(model, make_indicator_template(base, model.p(), config.gsf), config.gsf);
  auto gt = pf_init(model, config.gt_particles, derive_seed(config.seed, 0, streams::kGroundTruth),
                    config.resample_threshold);
  auto qkf = qkf_init(model);
  const std::size_t bins = config.bins_per_axis();

  for (std::size_t t = 1; t <= last; ++t) {
    const auto& y = traj.y[t - 1];
    const auto& u = traj.u[t - 1];
    GaussianMixture posterior = gsf.mixture;
    try {
      posterior = gsf_correct(gsf.mixture, u, model, gsf.indicator->for_output(y, sc.quantizer, config.gsf.alpha),
                              config.gsf.reduction_cap);
    } catch (const DegenerateUpdate& e) {
      fmt::print(stderr, "warning: step {}: {}; keeping the prior\n", t, e.what());
    }
    gt = pf_correct(std::move(gt), y, u, model, sc.quantizer);
    qkf = qkf_correct(std::move(qkf), y, u, model, sc.quantizer);

    if (wanted.contains(t)) {
      const Histogram h = make_histogram(gt.filtered, bins);
      PdfRecord rec;
      rec.step = t;
      const auto gt_probs = particle_histogram(h, gt);
      std::vector<double> gsf_probs(h.cells), qkf_probs(h.cells);
      rec.gsf_density.resize(h.cells);
      rec.gt_density.resize(h.cells);
      rec.qkf_density.resize(h.cells);
      for (std::size_t c = 0; c < h.cells; ++c) {
        const Vector x = cell_center(h, c);
        rec.gsf_density[c] = posterior.evaluate(x);
        rec.qkf_density[c] = std::exp(gaussian_logpdf(x, qkf.filtered.mean, qkf.filtered.covariance));
        rec.gt_density[c] = gt_probs[c] / h.cell_volume;
        gsf_probs[c] = rec.gsf_density[c] * h.cell_volume;
        qkf_probs[c] = rec.qkf_density[c] * h.cell_volume;
        rec.grid_x.push_back(x(0));
        if (model.n() == 2) rec.grid_y.push_back(x(1));
      }
      rec.tv_gsf = total_variation(gsf_probs, gt_probs);
      rec.tv_qkf = total_variation(qkf_probs, gt_probs);
      out.push_back(std::move(rec));
    }

    gsf.mixture = gsf_predict(posterior, u, model);
    gt = pf_predict(std::move(gt), u, model);
    qkf = qkf_predict(std::move(qkf), u, model);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

nlohmann::json summarize(const MCSummary& summary) {
  json filters = json::object();
  bool any_failure = false;
  for (auto f : summary.filters) {
    std::vector<std::vector<double>> mse(static_cast<std::size_t>(summary.state_dim));
    std::vector<double> total, seconds;
    json failed = json::array();
    for (const auto& r : summary.records) {
      if (r.filter != f) continue;
      if (!r.ok) {
        failed.push_back({{"run", r.run}, {"error", r.error}});
        continue;
      }
      double sum = 0.0;
      for (std::size_t d = 0; d < r.mse.size(); ++d) {
        mse[d].push_back(r.mse[d]);
        sum += r.mse[d];
      }
      total.push_back(sum);
      seconds.push_back(r.seconds);
    }
    any_failure = any_failure || !failed.empty();
    json medians = json::array(), q1 = json::array(), q3 = json::array();
    for (const auto& v : mse) {
      medians.push_back(median(v));
      q1.push_back(quantile(v, 0.25));
      q3.push_back(quantile(v, 0.75));
    }
    double mean_s = 0.0;
    for (double s : seconds) mean_s += s;
    mean_s = seconds.empty() ? 0.0 : mean_s / static_cast<double>(seconds.size());
    double var_s = 0.0;
    for (double s : seconds) var_s += (s - mean_s) * (s - mean_s);
    var_s = seconds.size() > 1 ? var_s / static_cast<double>(seconds.size() - 1) : 0.0;
    filters[filter_name(f)] = json{{"successful_runs", total.size()},
                                   {"failed_runs", failed},
                                   {"mse_median", medians},
                                   {"mse_q1", q1},
                                   {"mse_q3", q3},
                                   {"mse_total_median", median(total)},
                                   {"seconds_median", median(seconds)},
                                   {"seconds_mean", mean_s},
                                   {"seconds_std", std::sqrt(var_s)}};
  }
  json pdfs = json::array();
  for (const auto& p : summary.pdfs) pdfs.push_back({{"step", p.step}, {"tv_gsf_gt", p.tv_gsf}, {"tv_qkf_gt", p.tv_qkf}});
  return json{{"config", summary.config},
              {"state_dim", summary.state_dim},
              {"horizon", summary.horizon},
              {"runs", summary.truth.size()},
              {"filters", filters},
              {"pdf_comparisons", pdfs},
              {"any_failure", any_failure},
              {"degenerate_only", summary.degenerate_only()}};
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

void emit_outputs(const MCSummary& summary, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());

  {
    auto os = open_output(dir / "mse.csv");
    os << "run,filter,state_component,mse\n";
    for (const auto& r : summary.records) {
      if (!r.ok) continue;
      for (std::size_t d = 0; d < r.mse.size(); ++d) {
        os << fmt::format("{},{},{},{}\n", r.run, filter_name(r.filter), d + 1, r.mse[d]);
      }
    }
  }
  {
    auto os = open_output(dir / "timing.csv");
    os << "run,filter,seconds\n";
    for (const auto& r : summary.records) os << fmt::format("{},{},{}\n", r.run, filter_name(r.filter), r.seconds);
  }
  {
    auto os = open_output(dir / "envelope.csv");
    os << "t,filter,state_component,min,mean,max,truth\n";
    const auto n = static_cast<std::size_t>(summary.state_dim);
    for (std::size_t t = 0; t < summary.horizon && !summary.truth.empty(); ++t) {
      for (auto f : summary.filters) {
        for (std::size_t d = 0; d < n; ++d) {
          double lo = std::numeric_limits<double>::infinity();
          double hi = -std::numeric_limits<double>::infinity();
          double sum = 0.0;
          std::size_t count = 0;
          for (const auto& r : summary.records) {
            if (r.filter != f || !r.ok) continue;
            const double v = r.estimates[t](static_cast<Eigen::Index>(d));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
            ++count;
          }
          if (count == 0) continue;
          double truth = 0.0;
          for (const auto& run : summary.truth) truth += run[t](static_cast<Eigen::Index>(d));
          truth /= static_cast<double>(summary.truth.size());
          os << fmt::format("{},{},{},{},{},{},{}\n", t + 1, filter_name(f), d + 1, lo,
                            sum / static_cast<double>(count), hi, truth);
        }
      }
    }
  }
  {
    auto os = open_output(dir / "pdfs.csv");
    const bool two_d = summary.state_dim == 2;
    os << (two_d ? "step,grid_x,grid_y,gsf_density,gt_density\n" : "step,grid_x,gsf_density,gt_density\n");
    for (const auto& p : summary.pdfs) {
      for (std::size_t c = 0; c < p.grid_x.size(); ++c) {
        if (two_d) {
          os << fmt::format("{},{},{},{},{}\n", p.step, p.grid_x[c], p.grid_y[c], p.gsf_density[c], p.gt_density[c]);
        } else {
          os << fmt::format("{},{},{},{}\n", p.step, p.grid_x[c], p.gsf_density[c], p.gt_density[c]);
        }
      }
    }
  }
  {
    auto os = open_output(dir / "summary.json");
    os << summarize(summary).dump(2) << '\n';
  }
}

}  // namespace qgsf
