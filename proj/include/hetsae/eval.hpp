#pragma once

// Scoring metrics and the replicate simulation harness.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "hetsae/errors.hpp"
#include "hetsae/models.hpp"
#include "hetsae/random.hpp"
#include "hetsae/survey.hpp"

namespace hetsae {

/// (u - l) + (2/alpha)(l - theta) 1{theta < l} + (2/alpha)(theta - u) 1{theta > u}
inline double interval_score(double lower, double upper, double truth, double alpha) {
  if (lower > upper) throw InvalidInput("interval_score: lower bound exceeds upper bound");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidInput("interval_score: alpha must lie in (0, 1)");
  double s = upper - lower;
  if (truth < lower) s += 2.0 / alpha * (lower - truth);
  if (truth > upper) s += 2.0 / alpha * (truth - upper);
  return s;
}

struct RmseMetrics {
  Eigen::VectorXd rmse;          // per area
  Eigen::VectorXd direct_rmse;
  Eigen::VectorXd relative_rmse; // NaN where the direct RMSE is zero
  Eigen::VectorXd abs_bias;
  Eigen::VectorXd direct_abs_bias;
  double mean_rmse = 0.0;
  double mean_relative_rmse = 0.0;
  double mean_abs_bias = 0.0;
  double mean_direct_rmse = 0.0;
  double mean_direct_abs_bias = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline double nan_mean(const Eigen::VectorXd& v) {
  double s = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i])) {
      s += v[i];
      ++n;
    }
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

/// RMSE and |bias| of column j over the finite rows.
inline std::pair<double, double> column_error(const Eigen::MatrixXd& est, Eigen::Index j, double truth) {
  double ss = 0.0, sum = 0.0;
  int n = 0;
  for (Eigen::Index k = 0; k < est.rows(); ++k) {
    const double e = est(k, j);
    if (!std::isfinite(e)) continue;
    ss += (e - truth) * (e - truth);
    sum += e;
    ++n;
  }
  if (n == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  return {std::sqrt(ss / n), std::abs(sum / n - truth)};
}

}  // namespace detail

/// Per-area RMSE over replicates (rows) and the ratio to the direct estimator.
/// Non-finite entries are treated as missing replicates for that area.
inline RmseMetrics rmse_metrics(const Eigen::MatrixXd& estimates, const Eigen::VectorXd& truth,
                                const Eigen::MatrixXd& direct) {
  if (estimates.rows() < 1) throw InvalidInput("rmse_metrics: need at least one replicate");
  if (estimates.cols() != truth.size() || direct.cols() != truth.size() || direct.rows() != estimates.rows()) {
    throw InvalidInput("rmse_metrics: dimension mismatch");
  }
  const Eigen::Index d = truth.size();
  RmseMetrics m;
  m.rmse.resize(d);
  m.direct_rmse.resize(d);
  m.relative_rmse.resize(d);
  m.abs_bias.resize(d);
  m.direct_abs_bias.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    std::tie(m.rmse[j], m.abs_bias[j]) = detail::column_error(estimates, j, truth[j]);
    std::tie(m.direct_rmse[j], m.direct_abs_bias[j]) = detail::column_error(direct, j, truth[j]);
    if (m.direct_rmse[j] > 0.0) {
      m.relative_rmse[j] = m.rmse[j] / m.direct_rmse[j];
    } else {
      m.relative_rmse[j] = std::numeric_limits<double>::quiet_NaN();
      m.warnings.push_back("area " + std::to_string(j) + ": direct RMSE is zero or undefined; excluded from relative RMSE");
    }
  }
  m.mean_rmse = detail::nan_mean(m.rmse);
  m.mean_relative_rmse = detail::nan_mean(m.relative_rmse);
  m.mean_abs_bias = detail::nan_mean(m.abs_bias);
  m.mean_direct_rmse = detail::nan_mean(m.direct_rmse);
  m.mean_direct_abs_bias = detail::nan_mean(m.direct_abs_bias);
  return m;
}

struct CoverageMetrics {
  Eigen::VectorXd per_area;
  double mean = 0.0;
};

/// Fraction of replicates with lower <= truth <= upper, per area.
inline CoverageMetrics coverage_rate(const Eigen::MatrixXd& lower, const Eigen::MatrixXd& upper,
                                     const Eigen::VectorXd& truth) {
  if (lower.rows() != upper.rows() || lower.cols() != truth.size() || upper.cols() != truth.size()) {
    throw InvalidInput("coverage_rate: dimension mismatch");
  }
  CoverageMetrics c;
  c.per_area.resize(truth.size());
  for (Eigen::Index j = 0; j < truth.size(); ++j) {
    int hits = 0, n = 0;
    for (Eigen::Index k = 0; k < lower.rows(); ++k) {
      if (!std::isfinite(lower(k, j)) || !std::isfinite(upper(k, j))) continue;
      ++n;
      if (lower(k, j) <= truth[j] && truth[j] <= upper(k, j)) ++hits;
    }
    c.per_area[j] = n ? static_cast<double>(hits) / n : std::numeric_limits<double>::quiet_NaN();
  }
  c.mean = detail::nan_mean(c.per_area);
  return c;
}

/// n / (1 + 2 sum rho_k), summing autocorrelations until the first negative one.
inline double effective_sample_size(const Eigen::Ref<const Eigen::VectorXd>& chain) {
  const Eigen::Index n = chain.size();
  if (n < 2) return static_cast<double>(n);
  const Eigen::ArrayXd x = chain.array() - chain.mean();
  const double c0 = x.square().sum() / n;
  if (!(c0 > 0.0)) return static_cast<double>(n);
  double tau = 1.0;
  for (Eigen::Index lag = 1; lag < n; ++lag) {
    const double rho = (x.head(n - lag) * x.tail(n - lag)).sum() / n / c0;
    if (rho < 0.0) break;
    tau += 2.0 * rho;
  }
  return n / tau;
}

// ---------------------------------------------------------------------------
// Replication study
// ---------------------------------------------------------------------------

struct IntervalEstimates {
  Eigen::VectorXd point;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static IntervalEstimates missing(Eigen::Index d) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {Eigen::VectorXd::Constant(d, nan), Eigen::VectorXd::Constant(d, nan), Eigen::VectorXd::Constant(d, nan)};
  }
};

struct ReplicateResult {
  int k = 0;
  IntervalEstimates direct;
  std::vector<IntervalEstimates> models;  // aligned with StudyConfig::estimators
  Eigen::VectorXd truth;
};

struct StudyConfig {
  DesignKind design = DesignKind::stratified_srs;
  int n_per_area = 5;
  double expected_n = 1000.0;
  SizeStandardization size_standardization = SizeStandardization::z_score;
  std::vector<ModelKind> estimators{ModelKind::FH, ModelKind::HALM};
  int K = 100;
  std::uint64_t base_seed = 1;
  int parallelism = 1;
  FitConfig fit;  // model, seed and graph are set per estimator and replicate
  bool hulm_constrain_eta2_zero = true;  // the simulation protocol fixes eta2 = 0 for HULM
  double level = 0.95;
  bool log_response = true;
  std::optional<AdjacencyGraph> graph;  // defaults to the population's graph

  void validate() const {
    if (K < 1) throw InvalidInput("K must be at least 1");
    if (parallelism < 1) throw InvalidInput("parallelism must be at least 1");
    if (!(level > 0.0 && level < 1.0)) throw InvalidInput("level must lie in (0, 1)");
    if (design == DesignKind::stratified_srs && n_per_area < 1) throw InvalidInput("n_per_area must be positive");
    if (design == DesignKind::poisson_pps && !(expected_n > 0.0)) throw InvalidInput("expected_n must be positive");
    FitConfig probe = fit;
    probe.model = ModelKind::HALM;
    probe.validate();
  }
};

struct EstimatorMetrics {
  std::string estimator;
  double rel_rmse = 0.0;
  double abs_bias = 0.0;
  double cov_rate = 0.0;
  double int_score = 0.0;
  double rmse = 0.0;
};

struct AreaMetrics {
  std::string area_id;
  std::string estimator;
  double direct_rmse = 0.0;
  double model_rmse = 0.0;
  double abs_bias = 0.0;
  double coverage = 0.0;
  double int_score = 0.0;
};

struct MetricsTable {
  std::vector<EstimatorMetrics> estimators;  // "direct" first
  std::vector<AreaMetrics> per_area;
  std::vector<ReplicateResult> replicates;   // successful replicates, by k
  std::vector<std::string> area_ids;
  int failed_replicates = 0;
  std::vector<std::string> warnings;
};

namespace detail {

/// Sub-graph on the kept areas, reindexed in order.
inline std::optional<AdjacencyGraph> induced_subgraph(const AdjacencyGraph& g, const std::vector<int>& keep) {
  std::vector<int> remap(g.n_areas(), -1);
  for (std::size_t i = 0; i < keep.size(); ++i) remap[keep[i]] = static_cast<int>(i);
  std::vector<AdjacencyGraph::Edge> e;
  for (auto [i, j] : g.edges()) {
    if (remap[i] >= 0 && remap[j] >= 0) e.emplace_back(remap[i], remap[j]);
  }
  if (e.empty() || keep.empty()) return std::nullopt;
  return AdjacencyGraph(static_cast<int>(keep.size()), std::move(e));
}

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

inline ReplicateResult run_replicate(const SyntheticPopulation& pop, const StudyConfig& cfg,
                                     const Eigen::VectorXd& size_var, const Eigen::VectorXd& truth,
                                     const std::optional<AdjacencyGraph>& graph, int k) {
  const std::uint64_t rep_seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(k));
  Rng rng(rep_seed);
  const SampleDraw sample = cfg.design == DesignKind::stratified_srs
                                ? draw_stratified_srs(pop, cfg.n_per_area, rng)
                                : draw_poisson_pps(pop, cfg.expected_n, size_var, rng);
  Eigen::VectorXd responses(sample.size());
  for (Eigen::Index i = 0; i < sample.size(); ++i) responses[i] = pop.income[sample.units[i]];
  const DirectEstimates direct = direct_estimates(pop.area_size, sample, responses);

  const int d = pop.d;
  const double z = normal_quantile(1.0 - 0.5 * (1.0 - cfg.level));
  ReplicateResult res;
  res.k = k;
  res.truth = truth;
  res.direct = IntervalEstimates::missing(d);
  for (int a = 0; a < d; ++a) {
    if (!direct.usable[a]) continue;
    const double se = std::sqrt(direct.variance[a]);
    res.direct.point[a] = direct.mean[a];
    res.direct.lower[a] = direct.mean[a] - z * se;
    res.direct.upper[a] = direct.mean[a] + z * se;
  }

  // Area-level inputs: usable areas with positive direct means.
  std::vector<int> keep;
  for (int a = 0; a < d; ++a) {
    if (direct.usable[a] && direct.mean[a] > 0.0) keep.push_back(a);
  }
  const Eigen::MatrixXd X_area_full = pop.area_design();
  AreaDataset area;
  {
    const Eigen::Index m = static_cast<Eigen::Index>(keep.size());
    Eigen::VectorXd dm(m), dv(m);
    area.X.resize(m, X_area_full.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
      dm[i] = direct.mean[keep[i]];
      dv[i] = direct.variance[keep[i]];
      area.X.row(i) = X_area_full.row(keep[i]);
      area.n_samp.push_back(direct.n_samp[keep[i]]);
      area.area_ids.push_back(pop.area_ids[keep[i]]);
    }
    PreparedAreaInputs prep = prepare_area_inputs(dm, dv);
    area.y = std::move(prep.y);
    area.s2 = std::move(prep.s2);
  }

  // Unit-level inputs.
  UnitDataset unit;
  bool need_unit = false;
  for (ModelKind m : cfg.estimators) need_unit = need_unit || !is_area_level(m);
  if (need_unit) {
    unit.y = cfg.log_response ? Eigen::VectorXd(responses.array().log().matrix()) : responses;
    unit.X = pop.unit_design(sample.units);
    unit.area_index = sample.area;
    unit.w_scaled = sample.scaled_weight;
    unit.d = d;
    unit.population.X = pop.unit_design();
    unit.population.area_index = pop.area_index;
    unit.area_ids = pop.area_ids;
  }

  for (std::size_t e = 0; e < cfg.estimators.size(); ++e) {
    const ModelKind model = cfg.estimators[e];
    FitConfig fc = cfg.fit;
    fc.model = model;
    fc.seed = derive_seed(rep_seed, 1000 + e);
    if (model == ModelKind::HULM) fc.constrain_eta2_zero = fc.constrain_eta2_zero || cfg.hulm_constrain_eta2_zero;
    IntervalEstimates est = IntervalEstimates::missing(d);
    if (is_area_level(model)) {
      if (model == ModelKind::SHALM) {
        if (!graph) throw InvalidInput("SHALM requires an adjacency graph");
        fc.graph = keep.size() == static_cast<std::size_t>(d) ? graph : induced_subgraph(*graph, keep);
        if (!fc.graph) throw InvalidInput("SHALM: no adjacency among areas with direct estimates");
      }
      const PosteriorDraws draws = fit(area, fc);
      const AreaSummary s = summarize_posterior(draws, cfg.level);
      for (std::size_t i = 0; i < keep.size(); ++i) {
        est.point[keep[i]] = s.estimate[static_cast<Eigen::Index>(i)];
        est.lower[keep[i]] = s.lower[static_cast<Eigen::Index>(i)];
        est.upper[keep[i]] = s.upper[static_cast<Eigen::Index>(i)];
      }
    } else {
      const PosteriorDraws draws = fit(unit, fc);
      const Eigen::MatrixXd means = predict_unit_level_area_means(draws, unit.population, d, cfg.log_response,
                                                                  derive_seed(fc.seed, 7));
      const AreaSummary s = summarize_posterior(means, cfg.level, false);
      est.point = s.estimate;
      est.lower = s.lower;
      est.upper = s.upper;
    }
    res.models.push_back(std::move(est));
  }
  return res;
}

inline void stack_rows(const std::vector<ReplicateResult>& reps, int which, Eigen::MatrixXd& point,
                       Eigen::MatrixXd& lower, Eigen::MatrixXd& upper) {
  const Eigen::Index K = static_cast<Eigen::Index>(reps.size());
  const Eigen::Index d = reps.front().truth.size();
  point.resize(K, d);
  lower.resize(K, d);
  upper.resize(K, d);
  for (Eigen::Index k = 0; k < K; ++k) {
    const IntervalEstimates& e = which < 0 ? reps[k].direct : reps[k].models[which];
    point.row(k) = e.point.transpose();
    lower.row(k) = e.lower.transpose();
    upper.row(k) = e.upper.transpose();
  }
}

}  // namespace detail

/// Scores replicates into the per-estimator and per-area tables.
inline MetricsTable aggregate_replicates(std::vector<ReplicateResult> reps, const std::vector<ModelKind>& estimators,
                                         const std::vector<std::string>& area_ids, double level) {
  MetricsTable table;
  table.area_ids = area_ids;
  std::sort(reps.begin(), reps.end(), [](const auto& a, const auto& b) { return a.k < b.k; });
  if (reps.empty()) throw NumericalError("replication study: every replicate failed");
  const Eigen::VectorXd truth = reps.front().truth;
  const Eigen::Index d = truth.size();
  const double alpha = 1.0 - level;

  Eigen::MatrixXd dp, dl, du;
  detail::stack_rows(reps, -1, dp, dl, du);

  auto score = [&](const std::string& name, const Eigen::MatrixXd& p, const Eigen::MatrixXd& l,
                   const Eigen::MatrixXd& u) {
    const RmseMetrics rm = rmse_metrics(p, truth, dp);
    const CoverageMetrics cov = coverage_rate(l, u, truth);
    Eigen::VectorXd is(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      double s = 0.0;
      int n = 0;
      for (Eigen::Index k = 0; k < l.rows(); ++k) {
        if (!std::isfinite(l(k, j)) || !std::isfinite(u(k, j))) continue;
        s += interval_score(l(k, j), u(k, j), truth[j], alpha);
        ++n;
      }
      is[j] = n ? s / n : std::numeric_limits<double>::quiet_NaN();
    }
    table.estimators.push_back(
        {name, rm.mean_relative_rmse, rm.mean_abs_bias, cov.mean, detail::nan_mean(is), rm.mean_rmse});
    for (Eigen::Index j = 0; j < d; ++j) {
      table.per_area.push_back({area_ids[j], name, rm.direct_rmse[j], rm.rmse[j], rm.abs_bias[j], cov.per_area[j], is[j]});
    }
    for (const auto& w : rm.warnings) table.warnings.push_back(name + ": " + w);
  };

  score("direct", dp, dl, du);
  for (std::size_t e = 0; e < estimators.size(); ++e) {
    Eigen::MatrixXd p, l, u;
    detail::stack_rows(reps, static_cast<int>(e), p, l, u);
    score(to_string(estimators[e]), p, l, u);
  }
  table.replicates = std::move(reps);
  return table;
}

/// Draw K samples, estimate with every estimator, and score against the
/// population area means. Replicate k uses a stream derived from
/// (base_seed, k) only, so results do not depend on `parallelism`.
inline MetricsTable run_replication_study(const SyntheticPopulation& pop, const StudyConfig& cfg) {
  cfg.validate();
  pop.validate();
  const Eigen::VectorXd truth = pop.area_mean_income();
  const Eigen::VectorXd size_var = cfg.design == DesignKind::poisson_pps
                                       ? compute_size_variable(pop, cfg.size_standardization)
                                       : Eigen::VectorXd();
  const std::optional<AdjacencyGraph> graph = cfg.graph ? cfg.graph : pop.graph;

  std::vector<std::optional<ReplicateResult>> slots(cfg.K);
  std::vector<std::string> errors(cfg.K);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int k = next++; k < cfg.K; k = next++) {
      try {
        slots[k] = detail::run_replicate(pop, cfg, size_var, truth, graph, k + 1);
      } catch (const std::exception& ex) {
        errors[k] = ex.what();
      }
    }
  };
  const int n_threads = std::min(cfg.parallelism, cfg.K);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<ReplicateResult> ok;
  std::vector<std::string> warnings;
  int failed = 0;
  for (int k = 0; k < cfg.K; ++k) {
    if (slots[k]) {
      ok.push_back(std::move(*slots[k]));
    } else {
      ++failed;
      warnings.push_back("replicate " + std::to_string(k + 1) + " skipped: " + errors[k]);
    }
  }
  if (ok.empty()) throw NumericalError("replication study: every replicate failed; first error: " + errors.front());
  MetricsTable table = aggregate_replicates(std::move(ok), cfg.estimators, pop.area_ids, cfg.level);
  table.failed_replicates = failed;
  table.warnings.insert(table.warnings.begin(), warnings.begin(), warnings.end());
  return table;
}

}  // namespace hetsae
