#pragma once

// Model assembly and Gibbs orchestration for FH, HALM, SHALM, PL-BULM and HULM.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hetsae/errors.hpp"
#include "hetsae/gibbs.hpp"
#include "hetsae/random.hpp"
#include "hetsae/spatial.hpp"

namespace hetsae {

enum class ModelKind { FH, HALM, SHALM, PL_BULM, HULM };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::FH: return "fh";
    case ModelKind::HALM: return "halm";
    case ModelKind::SHALM: return "shalm";
    case ModelKind::PL_BULM: return "pl_bulm";
    case ModelKind::HULM: return "hulm";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  std::string t(s);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return c == '-' ? '_' : std::tolower(c); });
  if (t == "fh") return ModelKind::FH;
  if (t == "halm") return ModelKind::HALM;
  if (t == "shalm") return ModelKind::SHALM;
  if (t == "pl_bulm" || t == "plbulm") return ModelKind::PL_BULM;
  if (t == "hulm") return ModelKind::HULM;
  throw InvalidInput("unknown model '" + std::string(s) + "'");
}

inline bool is_area_level(ModelKind k) {
  return k == ModelKind::FH || k == ModelKind::HALM || k == ModelKind::SHALM;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct AreaDataset {
  Eigen::VectorXd y;        // log direct estimates
  Eigen::VectorXd s2;       // design variances on the log scale
  std::vector<int> n_samp;  // per-area sample sizes
  Eigen::MatrixXd X;        // d x p, includes the intercept column
  std::vector<std::string> area_ids;

  Eigen::Index d() const { return y.size(); }

  void validate() const {
    const Eigen::Index d = y.size();
    if (d == 0) throw InvalidInput("AreaDataset: no areas");
    if (s2.size() != d || static_cast<Eigen::Index>(n_samp.size()) != d || X.rows() != d ||
        static_cast<Eigen::Index>(area_ids.size()) != d) {
      throw InvalidInput("AreaDataset: field lengths differ");
    }
    for (Eigen::Index i = 0; i < d; ++i) {
      if (!std::isfinite(y[i])) throw InvalidInput("AreaDataset: y[" + std::to_string(i) + "] is not finite");
      if (!(s2[i] > 0.0) || !std::isfinite(s2[i])) throw InvalidInput("AreaDataset: s2 must be positive");
      if (n_samp[i] < 2) throw InvalidInput("AreaDataset: n_samp must be at least 2 (area " + area_ids[i] + ")");
    }
    if (!X.allFinite()) throw InvalidInput("AreaDataset: covariates must be finite");
  }
};

struct PreparedAreaInputs {
  Eigen::VectorXd y;
  Eigen::VectorXd s2;
  std::vector<std::string> warnings;
};

inline constexpr double kVarianceFloor = 1e-10;

/// Log transform with delta-method variances: y = log m, s2 = v / m^2.
inline PreparedAreaInputs prepare_area_inputs(const Eigen::VectorXd& direct_mean, const Eigen::VectorXd& direct_var) {
  if (direct_mean.size() != direct_var.size()) throw InvalidInput("prepare_area_inputs: length mismatch");
  PreparedAreaInputs out;
  out.y.resize(direct_mean.size());
  out.s2.resize(direct_mean.size());
  for (Eigen::Index i = 0; i < direct_mean.size(); ++i) {
    const double m = direct_mean[i];
    const double v = direct_var[i];
    if (!(m > 0.0)) throw InvalidInput("prepare_area_inputs: direct mean " + std::to_string(i) + " is not positive");
    if (!(v >= 0.0)) throw InvalidInput("prepare_area_inputs: direct variance " + std::to_string(i) + " is negative");
    out.y[i] = std::log(m);
    out.s2[i] = v / (m * m);
    if (out.s2[i] < kVarianceFloor) {
      out.warnings.push_back("area " + std::to_string(i) + ": zero direct variance floored at 1e-10");
      out.s2[i] = kVarianceFloor;
    }
  }
  return out;
}

struct PopulationTable {
  Eigen::MatrixXd X;  // rows are population units, same columns as the unit data
  std::vector<int> area_index;
};

struct UnitDataset {
  Eigen::VectorXd y;  // modelled response (log income when fitting on the log scale)
  Eigen::MatrixXd X;  // includes the intercept column
  std::vector<int> area_index;
  Eigen::VectorXd w_scaled;
  int d = 0;
  PopulationTable population;
  std::vector<std::string> area_ids;

  void validate() const {
    const Eigen::Index n = y.size();
    if (n == 0) throw InvalidInput("UnitDataset: no records");
    if (X.rows() != n || static_cast<Eigen::Index>(area_index.size()) != n || w_scaled.size() != n) {
      throw InvalidInput("UnitDataset: field lengths differ");
    }
    for (int a : area_index) {
      if (a < 0 || a >= d) throw InvalidInput("UnitDataset: area index out of range");
    }
    for (int a : population.area_index) {
      if (a < 0 || a >= d) throw InvalidInput("UnitDataset: population area index out of range");
    }
    if (population.X.rows() != static_cast<Eigen::Index>(population.area_index.size()) ||
        (population.X.rows() > 0 && population.X.cols() != X.cols())) {
      throw InvalidInput("UnitDataset: population table shape does not match the sample");
    }
    if (!(w_scaled.array() > 0.0).all()) throw InvalidInput("UnitDataset: weights must be positive");
    if (std::abs(w_scaled.sum() - static_cast<double>(n)) > 1e-8 * std::max(1.0, static_cast<double>(n))) {
      throw InvalidInput("UnitDataset: scaled weights must sum to the number of records");
    }
    if (!y.allFinite() || !X.allFinite()) throw InvalidInput("UnitDataset: non-finite values");
  }
};

/// w * n / sum(w).
inline Eigen::VectorXd scale_to_sample_size(const Eigen::VectorXd& w) {
  const double total = w.sum();
  if (!(total > 0.0)) throw InvalidInput("weights must have a positive sum");
  return w * (static_cast<double>(w.size()) / total);
}

// ---------------------------------------------------------------------------
// Configuration and output
// ---------------------------------------------------------------------------

enum class VarianceCovariates { same_as_mean, intercept_only };

struct FitConfig {
  ModelKind model = ModelKind::HALM;
  int iterations = 3000;
  int burn_in = 1000;
  int thin = 1;
  std::uint64_t seed = 1;
  Hyperparameters hyper;
  std::optional<AdjacencyGraph> graph;
  std::optional<double> icar_jitter;
  bool constrain_eta2_zero = false;
  VarianceCovariates variance_covariates = VarianceCovariates::same_as_mean;
  double proposal_sd = 0.1;
  bool adapt_proposal = true;
  int adapt_window = 20;
  double target_acceptance = 0.4;

  int retained() const { return (iterations - burn_in) / thin; }

  void validate() const {
    if (iterations <= 0) throw InvalidInput("iterations must be positive");
    if (burn_in < 0 || burn_in >= iterations) throw InvalidInput("burn_in must satisfy 0 <= burn_in < iterations");
    if (thin < 1) throw InvalidInput("thin must be at least 1");
    if (!(proposal_sd > 0.0)) throw InvalidInput("proposal_sd must be positive");
    if (model == ModelKind::SHALM && !graph) throw InvalidInput("SHALM requires an adjacency graph");
    hyper.validate();
  }
};

struct PosteriorDraws {
  ModelKind model = ModelKind::HALM;
  Eigen::MatrixXd beta1;          // retained x p
  Eigen::MatrixXd beta2;          // retained x p_var
  Eigen::MatrixXd eta1;           // retained x r
  Eigen::MatrixXd eta2;           // retained x r
  Eigen::VectorXd sigma2_eta1;
  Eigen::VectorXd sigma_eta2;
  Eigen::VectorXd sigma2_unit;    // PL-BULM common variance
  Eigen::MatrixXd theta;          // area-level: log-scale area means, retained x d
  std::vector<int> variance_columns;  // columns of the mean design that form X_var
  double mh_acceptance = std::numeric_limits<double>::quiet_NaN();
  double final_proposal_sd = std::numeric_limits<double>::quiet_NaN();
  std::size_t clamp_count = 0;
  std::vector<std::string> warnings;

  Eigen::Index retained() const { return beta1.rows(); }
};

namespace detail {

inline bool is_constant_one(const Eigen::MatrixXd& X, Eigen::Index col) {
  return (X.col(col).array() == 1.0).all();
}

inline std::vector<int> variance_columns_for(ModelKind model, VarianceCovariates choice, const Eigen::MatrixXd& X) {
  std::vector<int> cols;
  if (choice == VarianceCovariates::intercept_only) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      if (is_constant_one(X, j)) return {static_cast<int>(j)};
    }
    throw InvalidInput("intercept-only variance model requested but X has no intercept column");
  }
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    // SHALM drops the intercept: the ICAR-structured eta2 carries the level.
    if (model == ModelKind::SHALM && is_constant_one(X, j)) continue;
    cols.push_back(static_cast<int>(j));
  }
  return cols;
}

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X, const std::vector<int>& cols) {
  Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = X.col(cols[k]);
  return out;
}

inline Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                              const Eigen::VectorXd& w) {
  if (X.cols() == 0) return Eigen::VectorXd();
  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd A = sw.asDiagonal() * X;
  Eigen::MatrixXd ata = A.transpose() * A;
  ata.diagonal().array() += 1e-8;
  return ata.ldlt().solve(A.transpose() * (sw.asDiagonal() * y));
}

/// Records kept draws and tracks MH acceptance/adaptation across a run.
class DrawRecorder {
 public:
  DrawRecorder(const FitConfig& cfg, Eigen::Index p, Eigen::Index p_var, Eigen::Index r, Eigen::Index d_theta,
               PosteriorDraws& out)
      : cfg_(cfg), out_(out) {
    const int keep = cfg.retained();
    out.beta1.resize(keep, p);
    out.beta2.resize(keep, p_var);
    out.eta1.resize(keep, r);
    out.eta2.resize(keep, r);
    out.sigma2_eta1.resize(keep);
    out.sigma_eta2.resize(keep);
    out.sigma2_unit.resize(keep);
    out.theta.resize(keep, d_theta);
  }

  void maybe_record(int iter, const ChainState& s, double sigma2_unit) {
    if (iter < cfg_.burn_in) return;
    const int t = iter - cfg_.burn_in + 1;
    if (t % cfg_.thin != 0) return;
    const Eigen::Index row = t / cfg_.thin - 1;
    if (row >= out_.beta1.rows()) return;
    out_.beta1.row(row) = s.beta1.transpose();
    if (out_.beta2.cols() > 0) out_.beta2.row(row) = s.beta2.transpose();
    out_.eta1.row(row) = s.eta1.transpose();
    out_.eta2.row(row) = s.eta2.transpose();
    out_.sigma2_eta1[row] = s.sigma2_eta1;
    out_.sigma_eta2[row] = s.sigma_eta2;
    out_.sigma2_unit[row] = sigma2_unit;
    if (out_.theta.cols() > 0) out_.theta.row(row) = s.theta.transpose();
  }

 private:
  const FitConfig& cfg_;
  PosteriorDraws& out_;
};

class ProposalTuner {
 public:
  explicit ProposalTuner(const FitConfig& cfg) : cfg_(cfg), sd_(cfg.proposal_sd) {}

  double sd() const { return sd_; }

  void observe(int iter, bool accepted) {
    if (iter < cfg_.burn_in) {
      window_accepts_ += accepted ? 1 : 0;
      if (++window_steps_ == cfg_.adapt_window) {
        if (cfg_.adapt_proposal) {
          const double rate = static_cast<double>(window_accepts_) / window_steps_;
          sd_ *= rate < cfg_.target_acceptance ? 0.9 : 1.1;
        }
        window_accepts_ = 0;
        window_steps_ = 0;
      }
    } else {
      ++kept_steps_;
      kept_accepts_ += accepted ? 1 : 0;
    }
  }

  double acceptance_rate() const {
    return kept_steps_ == 0 ? std::numeric_limits<double>::quiet_NaN()
                            : static_cast<double>(kept_accepts_) / static_cast<double>(kept_steps_);
  }

 private:
  const FitConfig& cfg_;
  double sd_;
  int window_accepts_ = 0;
  int window_steps_ = 0;
  long kept_steps_ = 0;
  long kept_accepts_ = 0;
};

inline void guard_finite(const ChainState& s, int iter) {
  if (!s.finite()) throw NumericalError("chain state became non-finite at iteration " + std::to_string(iter));
}

inline double clamp_sigma_init(double v) { return std::clamp(std::isfinite(v) ? v : 1.0, 0.05, 2.0); }

inline double sample_sd(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 1.0;
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Area-level fit (FH, HALM, SHALM)
// ---------------------------------------------------------------------------

inline ModelDesign make_area_design(const AreaDataset& data, const FitConfig& cfg, std::vector<int>& var_cols) {
  ModelDesign design;
  const Eigen::Index d = data.d();
  design.X_mean = data.X;
  var_cols = cfg.model == ModelKind::FH ? std::vector<int>{}
                                        : detail::variance_columns_for(cfg.model, cfg.variance_covariates, data.X);
  design.X_var = detail::select_columns(data.X, var_cols);
  design.area_of.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) design.area_of[i] = static_cast<int>(i);
  design.n_effects = static_cast<int>(d);
  design.hyper = cfg.hyper;
  design.obs_weight = Eigen::VectorXd::Ones(d);
  design.gamma_shape.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) design.gamma_shape[i] = 0.5 * (data.n_samp[i] - 1);
  if (cfg.model == ModelKind::SHALM) {
    if (cfg.graph->n_areas() != d) {
      throw InvalidInput("adjacency graph has " + std::to_string(cfg.graph->n_areas()) + " areas but data has " +
                         std::to_string(d));
    }
    design.icar = std::make_shared<const IcarStructure>(build_icar(*cfg.graph, cfg.icar_jitter));
  }
  design.validate();
  return design;
}

inline PosteriorDraws fit(const AreaDataset& data, const FitConfig& cfg) {
  cfg.validate();
  data.validate();
  if (!is_area_level(cfg.model)) throw InvalidInput(to_string(cfg.model) + " needs unit-level data");

  PosteriorDraws out;
  out.model = cfg.model;
  const ModelDesign design = make_area_design(data, cfg, out.variance_columns);
  if (design.icar) out.warnings.insert(out.warnings.end(), design.icar->diagnostics.begin(), design.icar->diagnostics.end());

  const Eigen::Index d = data.d();
  const Eigen::Index p = data.X.cols();
  const Eigen::Index pv = design.X_var.cols();
  const bool fh = cfg.model == ModelKind::FH;
  const bool spatial = cfg.model == ModelKind::SHALM;
  const Eigen::MatrixXd beta1_prior = Eigen::MatrixXd::Identity(p, p) / cfg.hyper.sigma2_beta1;
  const Eigen::MatrixXd icar_prec = spatial ? design.icar->regularized_precision() : Eigen::MatrixXd();

  Rng rng(cfg.seed);
  ChainState s;
  const Eigen::VectorXd neg_log_s2 = -data.s2.array().log().matrix();
  s.beta1 = detail::weighted_least_squares(data.X, data.y, data.s2.cwiseInverse());
  s.eta1 = Eigen::VectorXd::Zero(d);
  s.theta = update_theta(s, design);
  s.sigma2_eta1 = std::max(1e-3, (data.y - s.theta).squaredNorm() / static_cast<double>(d));
  s.beta2 = detail::weighted_least_squares(design.X_var, neg_log_s2, Eigen::VectorXd::Ones(d));
  s.eta2 = pv > 0 ? Eigen::VectorXd(neg_log_s2 - design.X_var * s.beta2) : neg_log_s2;
  if (fh) s.eta2.setZero();
  s.sigma_eta2 = detail::clamp_sigma_init(detail::sample_sd(s.eta2));

  detail::DrawRecorder recorder(cfg, p, pv, d, d, out);
  detail::ProposalTuner tuner(cfg);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(d);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const Eigen::VectorXd sigma2 = fh ? data.s2 : observation_variances(s, design, &s.clamp_count);
    const Eigen::VectorXd rp = sigma2.cwiseInverse();

    s.beta1 = update_gaussian_coefficients(Eigen::VectorXd(data.y - s.eta1), data.X, rp, beta1_prior, rng);

    const Eigen::VectorXd resid1 = data.y - data.X * s.beta1;
    const Eigen::VectorXd lin = rp.cwiseProduct(resid1);
    if (spatial) {
      Eigen::MatrixXd prec = icar_prec / s.sigma2_eta1;
      prec.diagonal() += rp;
      s.eta1 = draw_gaussian(gaussian_from_precision(prec, lin), rng);
      s.eta1.array() -= s.eta1.mean();
    } else {
      s.eta1 = draw_gaussian_diagonal(Eigen::VectorXd(rp + ones / s.sigma2_eta1), lin, rng);
    }
    s.theta = update_theta(s, design);

    s.sigma2_eta1 = spatial ? update_random_effect_variance_ig(s.eta1, icar_prec, cfg.hyper.a, cfg.hyper.b, rng)
                            : update_random_effect_variance_ig(s.eta1, cfg.hyper.a, cfg.hyper.b, rng);

    if (!fh) {
      const Eigen::VectorXd res2 = (data.y - s.theta).array().square().matrix();
      if (pv > 0) {
        const CMLGParams cm =
            build_variance_cmlg(VarianceBlock::coefficients, s, design, res2, data.s2, &s.clamp_count);
        s.beta2 = update_variance_coefficients(cm, rng);
      }
      if (!cfg.constrain_eta2_zero) {
        const VarianceRows rows =
            variance_rows(VarianceBlock::random_effects, s, design, res2, data.s2, &s.clamp_count);
        s.eta2 = sample_random_effect_cmlg(rows, s, design, rng);
        const MhStep step = update_sigma_eta2_mh(s, design, rng, tuner.sd());
        s.sigma_eta2 = step.value;
        tuner.observe(iter, step.accepted);
      }
    }

    detail::guard_finite(s, iter);
    recorder.maybe_record(iter, s, std::numeric_limits<double>::quiet_NaN());
  }
  out.mh_acceptance = tuner.acceptance_rate();
  out.final_proposal_sd = tuner.sd();
  out.clamp_count = s.clamp_count;
  return out;
}

// ---------------------------------------------------------------------------
// Unit-level fit (PL-BULM, HULM)
// ---------------------------------------------------------------------------

inline ModelDesign make_unit_design(const UnitDataset& data, const FitConfig& cfg, std::vector<int>& var_cols) {
  ModelDesign design;
  design.X_mean = data.X;
  var_cols = cfg.model == ModelKind::HULM ? detail::variance_columns_for(cfg.model, cfg.variance_covariates, data.X)
                                          : std::vector<int>{};
  design.X_var = detail::select_columns(data.X, var_cols);
  design.area_of = data.area_index;
  design.n_effects = data.d;
  design.hyper = cfg.hyper;
  design.obs_weight = data.w_scaled;
  design.gamma_shape = Eigen::VectorXd::Zero(data.y.size());
  design.validate();
  return design;
}

inline PosteriorDraws fit(const UnitDataset& data, const FitConfig& cfg) {
  cfg.validate();
  data.validate();
  if (is_area_level(cfg.model)) throw InvalidInput(to_string(cfg.model) + " needs area-level data");

  PosteriorDraws out;
  out.model = cfg.model;
  const ModelDesign design = make_unit_design(data, cfg, out.variance_columns);
  const bool hulm = cfg.model == ModelKind::HULM;
  const Eigen::Index n = data.y.size();
  const Eigen::Index p = data.X.cols();
  const Eigen::Index pv = design.X_var.cols();
  const Eigen::Index r = data.d;
  const Eigen::MatrixXd beta1_prior = Eigen::MatrixXd::Identity(p, p) / cfg.hyper.sigma2_beta1;
  const Eigen::VectorXd& w = data.w_scaled;
  const double w_total = w.sum();

  Rng rng(cfg.seed);
  ChainState s;
  s.beta1 = detail::weighted_least_squares(data.X, data.y, w);
  s.eta1 = Eigen::VectorXd::Zero(r);
  s.theta = update_theta(s, design);
  const double resid_var =
      std::max(1e-6, w.dot((data.y - s.theta).array().square().matrix()) / std::max(1.0, w_total));
  double sigma2_unit = resid_var;
  s.sigma2_eta1 = 0.1 * resid_var + 1e-3;
  s.beta2 = Eigen::VectorXd::Zero(pv);
  for (std::size_t k = 0; k < out.variance_columns.size(); ++k) {
    if (detail::is_constant_one(data.X, out.variance_columns[k])) s.beta2[static_cast<Eigen::Index>(k)] = -std::log(resid_var);
  }
  s.eta2 = Eigen::VectorXd::Zero(r);
  s.sigma_eta2 = hulm ? 0.5 : 1.0;
  const bool sample_eta2 = hulm && !cfg.constrain_eta2_zero;

  detail::DrawRecorder recorder(cfg, p, pv, r, 0, out);
  detail::ProposalTuner tuner(cfg);
  const Eigen::VectorXd s2_unused = Eigen::VectorXd::Zero(n);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const Eigen::VectorXd sigma2 =
        hulm ? observation_variances(s, design, &s.clamp_count) : Eigen::VectorXd::Constant(n, sigma2_unit);
    const Eigen::VectorXd rp = w.cwiseQuotient(sigma2);

    s.beta1 = update_gaussian_coefficients(Eigen::VectorXd(data.y - design.psi_times(s.eta1)), data.X, rp,
                                           beta1_prior, rng);
    const Eigen::VectorXd resid1 = data.y - data.X * s.beta1;
    const Eigen::VectorXd prec = design.psi_transpose_times(rp).array() + 1.0 / s.sigma2_eta1;
    s.eta1 = draw_gaussian_diagonal(prec, design.psi_transpose_times(rp.cwiseProduct(resid1)), rng);
    s.theta = update_theta(s, design);
    s.sigma2_eta1 = update_random_effect_variance_ig(s.eta1, cfg.hyper.a, cfg.hyper.b, rng);

    const Eigen::VectorXd res2 = (data.y - s.theta).array().square().matrix();
    if (hulm) {
      if (pv > 0) {
        const CMLGParams cm =
            build_variance_cmlg(VarianceBlock::coefficients, s, design, res2, s2_unused, &s.clamp_count);
        s.beta2 = update_variance_coefficients(cm, rng);
      }
      if (sample_eta2) {
        const VarianceRows rows =
            variance_rows(VarianceBlock::random_effects, s, design, res2, s2_unused, &s.clamp_count);
        s.eta2 = sample_random_effect_cmlg(rows, s, design, rng);
        const MhStep step = update_sigma_eta2_mh(s, design, rng, tuner.sd());
        s.sigma_eta2 = step.value;
        tuner.observe(iter, step.accepted);
      }
    } else {
      // Weighted conjugate update of the common variance.
      sigma2_unit = std::exp(-rng.log_gamma(cfg.hyper.a + 0.5 * w_total, cfg.hyper.b + 0.5 * w.dot(res2)));
    }

    detail::guard_finite(s, iter);
    if (!std::isfinite(sigma2_unit)) throw NumericalError("unit variance became non-finite");
    recorder.maybe_record(iter, s, hulm ? std::numeric_limits<double>::quiet_NaN() : sigma2_unit);
  }
  out.mh_acceptance = tuner.acceptance_rate();
  out.final_proposal_sd = tuner.sd();
  out.clamp_count = s.clamp_count;
  return out;
}

// ---------------------------------------------------------------------------
// Prediction and summaries
// ---------------------------------------------------------------------------

/// Per-draw population-average prediction for each area (retained x d).
/// On the log scale each unit contributes exp(x'beta1 + eta1 + sigma2/2).
/// Areas without a fitted eta1 get a draw from N(0, sigma2_eta1).
inline Eigen::MatrixXd predict_unit_level_area_means(const PosteriorDraws& draws, const PopulationTable& population,
                                                     int d, bool log_scale_response, std::uint64_t seed = 0) {
  if (is_area_level(draws.model)) throw InvalidInput("area-mean prediction needs a unit-level fit");
  const Eigen::Index R = draws.retained();
  const Eigen::Index N = population.X.rows();
  if (N == 0) throw InvalidInput("population table is empty");
  if (population.X.cols() != draws.beta1.cols()) throw InvalidInput("population covariates do not match the fit");
  std::vector<double> counts(d, 0.0);
  for (int a : population.area_index) {
    if (a < 0 || a >= d) throw InvalidInput("population area index out of range");
    counts[a] += 1.0;
  }
  const Eigen::Index r_fit = draws.eta1.cols();
  const Eigen::MatrixXd X_var = detail::select_columns(population.X, draws.variance_columns);
  Rng rng(seed);

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(R, d);
  Eigen::VectorXd eta1(d), eta2(d);
  for (Eigen::Index t = 0; t < R; ++t) {
    for (int a = 0; a < d; ++a) {
      eta1[a] = a < r_fit ? draws.eta1(t, a) : std::sqrt(draws.sigma2_eta1[t]) * rng.normal();
      eta2[a] = a < draws.eta2.cols() ? draws.eta2(t, a) : 0.0;
    }
    const Eigen::VectorXd mean = population.X * draws.beta1.row(t).transpose();
    Eigen::VectorXd var_lp;
    if (draws.model == ModelKind::HULM && X_var.cols() > 0) var_lp = X_var * draws.beta2.row(t).transpose();
    for (Eigen::Index u = 0; u < N; ++u) {
      const int a = population.area_index[u];
      const double m = mean[u] + eta1[a];
      double value = m;
      if (log_scale_response) {
        double s2 = 0.0;
        if (draws.model == ModelKind::HULM) {
          s2 = clamped_exp(-((var_lp.size() ? var_lp[u] : 0.0) + eta2[a]));
        } else {
          s2 = draws.sigma2_unit[t];
        }
        value = std::exp(m + 0.5 * s2);
      }
      out(t, a) += value;
    }
  }
  for (int a = 0; a < d; ++a) {
    if (counts[a] > 0.0) {
      out.col(a) /= counts[a];
    } else {
      out.col(a).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

struct AreaSummary {
  Eigen::VectorXd estimate;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::VectorXd sd;
};

/// Linear-interpolation quantile of sorted values (type 7).
inline double sorted_quantile(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Per-column posterior mean, equal-tailed interval and sd. With
/// `back_transform` each draw is exponentiated first.
inline AreaSummary summarize_posterior(const Eigen::MatrixXd& draws, double level, bool back_transform) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidInput("credible level must lie in (0, 1)");
  if (draws.rows() == 0) throw InvalidInput("no retained draws to summarize");
  const Eigen::Index R = draws.rows();
  const Eigen::Index d = draws.cols();
  AreaSummary s;
  s.estimate.resize(d);
  s.lower.resize(d);
  s.upper.resize(d);
  s.sd.resize(d);
  std::vector<double> col(R);
  for (Eigen::Index j = 0; j < d; ++j) {
    double sum = 0.0;
    for (Eigen::Index t = 0; t < R; ++t) {
      col[t] = back_transform ? std::exp(draws(t, j)) : draws(t, j);
      sum += col[t];
    }
    const double mean = sum / static_cast<double>(R);
    double ss = 0.0;
    for (double v : col) ss += (v - mean) * (v - mean);
    s.estimate[j] = mean;
    s.sd[j] = R > 1 ? std::sqrt(ss / static_cast<double>(R - 1)) : 0.0;
    std::sort(col.begin(), col.end());
    s.lower[j] = sorted_quantile(col, 0.5 * (1.0 - level));
    s.upper[j] = sorted_quantile(col, 1.0 - 0.5 * (1.0 - level));
  }
  return s;
}

/// Area-level fits: back-transformed theta. Unit-level fits need the predicted
/// area means and should call the matrix overload.
inline AreaSummary summarize_posterior(const PosteriorDraws& draws, double level) {
  if (!is_area_level(draws.model)) throw InvalidInput("unit-level fits are summarized from predicted area means");
  return summarize_posterior(draws.theta, level, true);
}

}  // namespace hetsae
