#pragma once

// Synthetic finite populations, the two sampling designs, weight scaling and
// design-based direct estimation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hetsae/errors.hpp"
#include "hetsae/random.hpp"
#include "hetsae/spatial.hpp"

namespace hetsae {

/// Unit covariates are [age (standardized), sex (0/1), race level 2, race
/// level 3]; the area covariate is the centred log population size.
struct GenerationSpec {
  int n_areas = 30;
  int min_size = 300;
  int max_size = 600;
  bool spatial = true;
  std::optional<AdjacencyGraph> graph;  // defaults to a near-square rook lattice
  bool heteroscedastic = true;
  bool informative = true;
  // Log-income mean: intercept, age, sex, race2, race3, centred log population.
  std::vector<double> beta_mean{10.3, 0.25, 0.15, -0.20, 0.10, 0.30};
  // Negative log variance: same layout.
  std::vector<double> beta_var{0.6, 0.20, 0.0, 0.0, -0.20, 0.8};
  double tau_u = 0.30;  // sd of the area mean effects
  double tau_v = 0.45;  // sd of the area variance effects
  double weight_log_mean = 4.0;
  double weight_log_sd = 0.5;
  double weight_income_corr = 0.6;  // used when informative
  // Log-scale errors are sqrt(1 - s^2) Z + s (1 - E), Z standard normal and
  // E unit exponential: mean 0 and variance 1 for any s in [0, 1]. s > 0
  // gives the long lower tail typical of incomes.
  double error_skew = 1.0;

  void validate() const {
    if (n_areas < 1) throw InvalidInput("generation: n_areas must be positive");
    if (min_size < 1 || max_size < min_size) throw InvalidInput("generation: invalid area size range");
    if (beta_mean.size() != 6 || beta_var.size() != 6) throw InvalidInput("generation: coefficient vectors need 6 entries");
    if (tau_u < 0.0 || tau_v < 0.0 || weight_log_sd < 0.0) throw InvalidInput("generation: scales must be nonnegative");
    if (std::abs(weight_income_corr) > 1.0) throw InvalidInput("generation: weight_income_corr must lie in [-1, 1]");
    if (error_skew < 0.0 || error_skew > 1.0) throw InvalidInput("generation: error_skew must lie in [0, 1]");
    if (graph && graph->n_areas() != n_areas) throw InvalidInput("generation: graph size differs from n_areas");
  }
};

inline constexpr int kUnitCovariates = 4;

struct SyntheticPopulation {
  int d = 0;
  std::vector<int> area_index;       // per unit
  Eigen::MatrixXd covariates;        // N x kUnitCovariates
  Eigen::VectorXd base_weight;
  Eigen::VectorXd income;            // > 0
  std::vector<int> area_size;
  std::vector<std::string> area_ids;
  std::optional<AdjacencyGraph> graph;
  // Generating truth.
  Eigen::VectorXd u;                 // area mean effects
  Eigen::VectorXd v;                 // area variance effects
  Eigen::VectorXd unit_variance;     // log-scale variance per unit

  Eigen::Index size() const { return income.size(); }

  Eigen::VectorXd area_mean_income() const {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    for (Eigen::Index k = 0; k < size(); ++k) sum[area_index[k]] += income[k];
    for (int a = 0; a < d; ++a) sum[a] /= area_size[a];
    return sum;
  }

  /// Area design [1, log N_a].
  Eigen::MatrixXd area_design() const {
    Eigen::MatrixXd X(d, 2);
    for (int a = 0; a < d; ++a) {
      X(a, 0) = 1.0;
      X(a, 1) = std::log(static_cast<double>(area_size[a]));
    }
    return X;
  }

  /// Unit design [1, covariates] for the listed units (all units if empty).
  Eigen::MatrixXd unit_design(const std::vector<int>& units) const {
    const Eigen::Index n = static_cast<Eigen::Index>(units.size());
    const Eigen::Index p = covariates.cols();
    Eigen::MatrixXd X(n, p + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      X(i, 0) = 1.0;
      X.row(i).tail(p) = covariates.row(units[i]);
    }
    return X;
  }

  Eigen::MatrixXd unit_design() const {
    std::vector<int> all(size());
    std::iota(all.begin(), all.end(), 0);
    return unit_design(all);
  }

  void validate() const {
    if (d < 1) throw InvalidInput("population: no areas");
    const Eigen::Index N = size();
    if (static_cast<Eigen::Index>(area_index.size()) != N || base_weight.size() != N || covariates.rows() != N) {
      throw InvalidInput("population: field lengths differ");
    }
    std::vector<int> count(d, 0);
    for (int a : area_index) {
      if (a < 0 || a >= d) throw InvalidInput("population: area index out of range");
      ++count[a];
    }
    for (int a = 0; a < d; ++a) {
      if (count[a] == 0) throw InvalidInput("population: area " + std::to_string(a) + " is empty");
      if (count[a] != area_size[a]) throw InvalidInput("population: area sizes inconsistent");
    }
    if (!(income.array() > 0.0).all()) throw InvalidInput("population: incomes must be positive");
    if (!(base_weight.array() > 0.0).all()) throw InvalidInput("population: base weights must be positive");
  }
};

inline AdjacencyGraph default_lattice(int n_areas) {
  int rows = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n_areas))));
  while (rows > 1 && n_areas % rows != 0) --rows;
  if (rows <= 1) return AdjacencyGraph::path(n_areas);
  return AdjacencyGraph::grid(rows, n_areas / rows);
}

/// Sum-to-zero ICAR draw on the non-null eigenvectors, rescaled to sd `tau`.
template <RandomStream Stream>
Eigen::VectorXd draw_icar_field(const AdjacencyGraph& graph, double tau, Stream& rng) {
  const IcarStructure icar = build_icar(graph);
  Eigen::VectorXd field = Eigen::VectorXd::Zero(graph.n_areas());
  for (Eigen::Index k = 0; k < icar.eigenvalues.size(); ++k) {
    const double lam = icar.eigenvalues[k] - icar.jitter;
    const double z = rng.normal();
    if (lam > 1e-8) field += (z / std::sqrt(lam)) * icar.eigenvectors.col(k);
  }
  field.array() -= field.mean();
  const double sd = std::sqrt(field.squaredNorm() / std::max<Eigen::Index>(1, field.size() - 1));
  if (sd > 0.0) field *= tau / sd;
  return field;
}

template <RandomStream Stream>
SyntheticPopulation generate_population(const GenerationSpec& spec, Stream& rng) {
  spec.validate();
  SyntheticPopulation pop;
  pop.d = spec.n_areas;
  pop.graph = spec.graph ? spec.graph : std::optional<AdjacencyGraph>(default_lattice(spec.n_areas));
  pop.area_size.resize(pop.d);
  pop.area_ids.resize(pop.d);
  for (int a = 0; a < pop.d; ++a) {
    pop.area_size[a] = spec.min_size + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_size - spec.min_size + 1)));
    pop.area_ids[a] = "A" + std::to_string(a + 1);
  }

  const bool use_graph = spec.spatial && pop.graph && !pop.graph->edges().empty();
  auto area_effect = [&](double tau) {
    if (use_graph) return draw_icar_field(*pop.graph, tau, rng);
    Eigen::VectorXd e(pop.d);
    for (int a = 0; a < pop.d; ++a) e[a] = tau * rng.normal();
    return e;
  };
  pop.u = area_effect(spec.tau_u);
  pop.v = spec.heteroscedastic ? area_effect(spec.tau_v) : Eigen::VectorXd::Zero(pop.d);

  Eigen::VectorXd log_pop(pop.d);
  for (int a = 0; a < pop.d; ++a) log_pop[a] = std::log(static_cast<double>(pop.area_size[a]));
  log_pop.array() -= log_pop.mean();

  const int N = std::accumulate(pop.area_size.begin(), pop.area_size.end(), 0);
  pop.area_index.resize(N);
  pop.covariates.resize(N, kUnitCovariates);
  pop.base_weight.resize(N);
  pop.income.resize(N);
  pop.unit_variance.resize(N);

  const auto& bm = spec.beta_mean;
  const auto& bv = spec.beta_var;
  int k = 0;
  for (int a = 0; a < pop.d; ++a) {
    for (int j = 0; j < pop.area_size[a]; ++j, ++k) {
      pop.area_index[k] = a;
      const double age = std::clamp(rng.normal(), -2.0, 2.5);
      const double sex = rng.uniform() < 0.5 ? 1.0 : 0.0;
      const double race_u = rng.uniform();
      const double race2 = race_u < 0.25 ? 1.0 : 0.0;
      const double race3 = race_u >= 0.25 && race_u < 0.40 ? 1.0 : 0.0;
      pop.covariates.row(k) << age, sex, race2, race3;

      const double mean = bm[0] + bm[1] * age + bm[2] * sex + bm[3] * race2 + bm[4] * race3 + bm[5] * log_pop[a] + pop.u[a];
      double neg_log_var = bv[0];
      if (spec.heteroscedastic) {
        neg_log_var += bv[1] * age + bv[2] * sex + bv[3] * race2 + bv[4] * race3 + bv[5] * log_pop[a] + pop.v[a];
      }
      const double var = std::exp(-neg_log_var);
      double z = rng.normal();
      if (spec.error_skew > 0.0) {
        const double e = -std::log(rng.uniform());
        z = std::sqrt(1.0 - spec.error_skew * spec.error_skew) * z + spec.error_skew * (1.0 - e);
      }
      pop.unit_variance[k] = var;
      pop.income[k] = std::exp(mean + std::sqrt(var) * z);

      const double rho = spec.informative ? spec.weight_income_corr : 0.0;
      const double mix = rho * z + std::sqrt(1.0 - rho * rho) * rng.normal();
      pop.base_weight[k] = std::exp(spec.weight_log_mean + spec.weight_log_sd * mix);
    }
  }
  pop.validate();
  return pop;
}

// ---------------------------------------------------------------------------
// Designs
// ---------------------------------------------------------------------------

enum class DesignKind { stratified_srs, poisson_pps };

inline std::string to_string(DesignKind k) { return k == DesignKind::stratified_srs ? "stratified" : "pps"; }

inline DesignKind parse_design_kind(const std::string& s) {
  if (s == "stratified" || s == "stratified_srs" || s == "srs") return DesignKind::stratified_srs;
  if (s == "pps" || s == "poisson_pps" || s == "poisson") return DesignKind::poisson_pps;
  throw InvalidInput("unknown design '" + s + "' (expected stratified or pps)");
}

struct SampleDraw {
  std::vector<int> units;            // population indices, area-grouped
  std::vector<int> area;             // area of each selected unit
  Eigen::VectorXd inclusion_prob;
  Eigen::VectorXd design_weight;     // 1 / pi
  Eigen::VectorXd scaled_weight;     // sums to the sample size
  DesignKind design = DesignKind::stratified_srs;
  std::vector<int> area_counts;

  Eigen::Index size() const { return static_cast<Eigen::Index>(units.size()); }
};

/// w * n / sum(w).
inline SampleDraw scale_weights(SampleDraw sample) {
  if (sample.size() == 0) throw InvalidInput("scale_weights: empty sample");
  const double total = sample.design_weight.sum();
  sample.scaled_weight = sample.design_weight * (static_cast<double>(sample.size()) / total);
  return sample;
}

template <RandomStream Stream>
SampleDraw draw_stratified_srs(const SyntheticPopulation& pop, int n_per_area, Stream& rng) {
  if (n_per_area < 1) throw InvalidInput("stratified SRS: n_per_area must be positive");
  for (int a = 0; a < pop.d; ++a) {
    if (pop.area_size[a] < n_per_area) {
      throw InvalidInput("stratified SRS: area " + pop.area_ids[a] + " has fewer than " + std::to_string(n_per_area) +
                         " units");
    }
  }
  std::vector<std::vector<int>> members(pop.d);
  for (Eigen::Index k = 0; k < pop.size(); ++k) members[pop.area_index[k]].push_back(static_cast<int>(k));

  SampleDraw s;
  s.design = DesignKind::stratified_srs;
  s.area_counts.assign(pop.d, n_per_area);
  const Eigen::Index n = static_cast<Eigen::Index>(pop.d) * n_per_area;
  s.inclusion_prob.resize(n);
  s.design_weight.resize(n);
  Eigen::Index pos = 0;
  for (int a = 0; a < pop.d; ++a) {
    auto& m = members[a];
    const int N = static_cast<int>(m.size());
    // Partial Fisher-Yates.
    for (int j = 0; j < n_per_area; ++j) {
      const int pick = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(N - j)));
      std::swap(m[j], m[pick]);
      s.units.push_back(m[j]);
      s.area.push_back(a);
      s.inclusion_prob[pos] = static_cast<double>(n_per_area) / N;
      s.design_weight[pos] = static_cast<double>(N) / n_per_area;
      ++pos;
    }
  }
  return scale_weights(std::move(s));
}

enum class SizeStandardization { z_score, mean_ratio };

/// exp(2 + 0.3 w~ + 0.3 y~) with w~, y~ the standardized base weight and income.
inline Eigen::VectorXd compute_size_variable(const Eigen::VectorXd& base_weight, const Eigen::VectorXd& income,
                                             SizeStandardization how = SizeStandardization::z_score) {
  if (base_weight.size() == 0 || base_weight.size() != income.size()) {
    throw InvalidInput("size variable: empty or mismatched columns");
  }
  auto standardize = [&](const Eigen::VectorXd& x, const char* name) {
    const double m = x.mean();
    if (how == SizeStandardization::mean_ratio) {
      if (!(m != 0.0)) throw InvalidInput(std::string("size variable: zero mean in ") + name);
      return Eigen::VectorXd((x.array() / m - 1.0).matrix());
    }
    const double sd = std::sqrt((x.array() - m).square().mean());
    if (!(sd > 0.0)) throw InvalidInput(std::string("size variable: zero variance in ") + name);
    return Eigen::VectorXd(((x.array() - m) / sd).matrix());
  };
  const Eigen::VectorXd zw = standardize(base_weight, "weight");
  const Eigen::VectorXd zy = standardize(income, "income");
  return (2.0 + 0.3 * zw.array() + 0.3 * zy.array()).exp().matrix();
}

inline Eigen::VectorXd compute_size_variable(const SyntheticPopulation& pop,
                                             SizeStandardization how = SizeStandardization::z_score) {
  return compute_size_variable(pop.base_weight, pop.income, how);
}

/// pi_u = min(1, n * size_u / sum(size)), selected independently.
inline Eigen::VectorXd poisson_inclusion_probabilities(const Eigen::VectorXd& size, double expected_n) {
  if (!(expected_n > 0.0)) throw InvalidInput("Poisson PPS: expected sample size must be positive");
  if (!(size.array() > 0.0).all()) throw InvalidInput("Poisson PPS: sizes must be positive");
  const double total = size.sum();
  return (expected_n * size.array() / total).min(1.0).matrix();
}

template <RandomStream Stream>
SampleDraw draw_poisson_pps(const SyntheticPopulation& pop, double expected_n, const Eigen::VectorXd& size,
                            Stream& rng) {
  if (size.size() != pop.size()) throw InvalidInput("Poisson PPS: size vector length differs from population");
  const Eigen::VectorXd pi = poisson_inclusion_probabilities(size, expected_n);
  SampleDraw s;
  s.design = DesignKind::poisson_pps;
  s.area_counts.assign(pop.d, 0);
  std::vector<double> probs;
  for (Eigen::Index k = 0; k < pop.size(); ++k) {
    if (rng.uniform() < pi[k]) {
      s.units.push_back(static_cast<int>(k));
      s.area.push_back(pop.area_index[k]);
      probs.push_back(pi[k]);
      ++s.area_counts[pop.area_index[k]];
    }
  }
  if (s.units.empty()) throw InvalidInput("Poisson PPS: realized sample is empty");
  s.inclusion_prob = Eigen::Map<const Eigen::VectorXd>(probs.data(), static_cast<Eigen::Index>(probs.size()));
  s.design_weight = s.inclusion_prob.cwiseInverse();
  return scale_weights(std::move(s));
}

// ---------------------------------------------------------------------------
// Direct estimation
// ---------------------------------------------------------------------------

enum class DirectMeanForm { hajek, horvitz_thompson };

struct DirectEstimates {
  Eigen::VectorXd mean;      // NaN where the area has no sample
  Eigen::VectorXd variance;  // NaN where undefined (n < 2)
  std::vector<int> n_samp;
  std::vector<bool> usable;  // n >= 2 and both moments defined

  Eigen::Index d() const { return mean.size(); }
};

/// Per-area weighted means and design variances from a sample. `responses`
/// is aligned with sample.units.
inline DirectEstimates direct_estimates(const std::vector<int>& area_sizes, const SampleDraw& sample,
                                        const Eigen::VectorXd& responses,
                                        DirectMeanForm form = DirectMeanForm::hajek) {
  const int d = static_cast<int>(area_sizes.size());
  if (responses.size() != sample.size()) throw InvalidInput("direct estimates: responses misaligned with sample");
  DirectEstimates out;
  out.mean = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::quiet_NaN());
  out.variance = out.mean;
  out.n_samp.assign(d, 0);
  out.usable.assign(d, false);

  std::vector<double> wsum(d, 0.0), wy(d, 0.0);
  for (Eigen::Index i = 0; i < sample.size(); ++i) {
    const int a = sample.area[i];
    if (a < 0 || a >= d) throw InvalidInput("direct estimates: area index out of range");
    ++out.n_samp[a];
    wsum[a] += sample.design_weight[i];
    wy[a] += sample.design_weight[i] * responses[i];
  }
  for (int a = 0; a < d; ++a) {
    if (out.n_samp[a] == 0) continue;
    out.mean[a] = form == DirectMeanForm::hajek ? wy[a] / wsum[a] : wy[a] / area_sizes[a];
  }

  std::vector<double> acc(d, 0.0);
  for (Eigen::Index i = 0; i < sample.size(); ++i) {
    const int a = sample.area[i];
    const double dev = responses[i] - out.mean[a];
    if (sample.design == DesignKind::stratified_srs) {
      acc[a] += dev * dev;
    } else {
      const double w = sample.design_weight[i];
      acc[a] += w * (w - 1.0) * dev * dev;
    }
  }
  for (int a = 0; a < d; ++a) {
    const int n = out.n_samp[a];
    if (n < 2) continue;
    if (sample.design == DesignKind::stratified_srs) {
      const double s2 = acc[a] / (n - 1);
      out.variance[a] = (1.0 - static_cast<double>(n) / area_sizes[a]) * s2 / n;
    } else {
      out.variance[a] = acc[a] / (wsum[a] * wsum[a]);
    }
    out.usable[a] = std::isfinite(out.mean[a]) && std::isfinite(out.variance[a]);
  }
  return out;
}

}  // namespace hetsae
