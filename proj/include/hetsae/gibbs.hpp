#pragma once

// Full-conditional update kernels shared by every model fitter.
//
// Conventions: observation i has mean theta_i = x_i' beta1 + eta1[area(i)] and
// variance sigma2_i = exp(-(x_var_i' beta2 + eta2[area(i)])). The variance
// conditionals are cMLG with rows stacked as [Gaussian data rows; s2 data rows;
// prior rows].

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "hetsae/errors.hpp"
#include "hetsae/mlg.hpp"
#include "hetsae/random.hpp"
#include "hetsae/spatial.hpp"

namespace hetsae {

struct Hyperparameters {
  double sigma2_beta1 = 1000.0;
  double sigma2_beta2 = 1000.0;
  double a = 0.5;
  double b = 0.5;
  double c = 5.0;  // variance of the half-normal prior on sigma_eta2
  double alpha_mlg = 1000.0;

  void validate() const {
    auto pos = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw InvalidInput(std::string("hyperparameter ") + name + " must be positive");
    };
    pos(sigma2_beta1, "sigma2_beta1");
    pos(sigma2_beta2, "sigma2_beta2");
    pos(a, "a");
    pos(b, "b");
    pos(c, "c");
    pos(alpha_mlg, "alpha");
  }
};

struct ChainState {
  Eigen::VectorXd beta1;
  Eigen::VectorXd beta2;
  Eigen::VectorXd eta1;
  Eigen::VectorXd eta2;
  double sigma2_eta1 = 1.0;
  double sigma_eta2 = 1.0;
  Eigen::VectorXd theta;
  std::size_t clamp_count = 0;

  bool finite() const {
    return beta1.allFinite() && beta2.allFinite() && eta1.allFinite() && eta2.allFinite() &&
           theta.allFinite() && std::isfinite(sigma2_eta1) && std::isfinite(sigma_eta2) &&
           sigma2_eta1 > 0.0 && sigma_eta2 > 0.0;
  }
};

/// Design matrices, incidence map and hyperparameters for one fit. The
/// incidence matrix Psi is held as `area_of` (row i has its single 1 in
/// column area_of[i]).
struct ModelDesign {
  Eigen::MatrixXd X_mean;
  Eigen::MatrixXd X_var;
  std::vector<int> area_of;
  int n_effects = 0;
  Hyperparameters hyper;
  Eigen::VectorXd obs_weight;
  Eigen::VectorXd gamma_shape;
  std::shared_ptr<const IcarStructure> icar;

  Eigen::Index n_obs() const { return X_mean.rows(); }

  void validate() const {
    const Eigen::Index n = X_mean.rows();
    if (X_var.rows() != n || static_cast<Eigen::Index>(area_of.size()) != n || obs_weight.size() != n ||
        gamma_shape.size() != n) {
      throw InvalidInput("ModelDesign: row counts of X_mean, X_var, Psi, weights and gamma_shape differ");
    }
    for (int a : area_of) {
      if (a < 0 || a >= n_effects) throw InvalidInput("ModelDesign: area index out of range");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(obs_weight[i] > 0.0)) throw InvalidInput("ModelDesign: observation weights must be positive");
      if (!(gamma_shape[i] >= 0.0)) throw InvalidInput("ModelDesign: gamma_shape must be nonnegative");
    }
    if (icar && icar->size() != n_effects) throw InvalidInput("ModelDesign: ICAR size differs from effect count");
    hyper.validate();
  }

  /// Psi as a dense matrix.
  Eigen::MatrixXd psi_matrix() const {
    Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(n_obs(), n_effects);
    for (Eigen::Index i = 0; i < n_obs(); ++i) psi(i, area_of[i]) = 1.0;
    return psi;
  }

  Eigen::VectorXd psi_times(const Eigen::VectorXd& eta) const {
    Eigen::VectorXd out(n_obs());
    for (Eigen::Index i = 0; i < n_obs(); ++i) out[i] = eta[area_of[i]];
    return out;
  }

  Eigen::VectorXd psi_transpose_times(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n_effects);
    for (Eigen::Index i = 0; i < n_obs(); ++i) out[area_of[i]] += v[i];
    return out;
  }

  /// Validates a dense 0/1 incidence matrix and returns its column indices.
  static std::vector<int> area_index_from_psi(const Eigen::MatrixXd& psi) {
    std::vector<int> out(psi.rows(), -1);
    for (Eigen::Index i = 0; i < psi.rows(); ++i) {
      int hits = 0;
      for (Eigen::Index j = 0; j < psi.cols(); ++j) {
        if (psi(i, j) == 1.0) {
          out[i] = static_cast<int>(j);
          ++hits;
        } else if (psi(i, j) != 0.0) {
          hits = -1;
          break;
        }
      }
      if (hits != 1) throw InvalidInput("Psi row " + std::to_string(i) + " must contain exactly one 1");
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Gaussian updates
// ---------------------------------------------------------------------------

/// N(A^{-1} b, A^{-1}) held through the Cholesky factor of the precision A.
struct GaussianConditional {
  Eigen::VectorXd mean;
  Eigen::LLT<Eigen::MatrixXd> llt;

  Eigen::MatrixXd covariance() const {
    return llt.solve(Eigen::MatrixXd::Identity(mean.size(), mean.size()));
  }
};

inline GaussianConditional gaussian_from_precision(const Eigen::MatrixXd& precision,
                                                   const Eigen::VectorXd& linear_term) {
  GaussianConditional g;
  g.llt.compute(precision);
  if (g.llt.info() != Eigen::Success) {
    throw NumericalError("posterior precision is not positive definite");
  }
  g.mean = g.llt.solve(linear_term);
  return g;
}

/// Posterior of coefficients under y_adj ~ N(Z b, diag(1/resid_precision)) and
/// prior precision P: N((Z'WZ + P)^{-1} Z'W y_adj, (Z'WZ + P)^{-1}).
inline GaussianConditional gaussian_coefficient_conditional(const Eigen::VectorXd& y_adj,
                                                            const Eigen::MatrixXd& Z,
                                                            const Eigen::VectorXd& resid_precision,
                                                            const Eigen::MatrixXd& prior_precision) {
  if (Z.rows() != y_adj.size() || resid_precision.size() != y_adj.size() ||
      prior_precision.rows() != Z.cols() || prior_precision.cols() != Z.cols()) {
    throw InvalidInput("gaussian update: dimension mismatch");
  }
  for (Eigen::Index i = 0; i < resid_precision.size(); ++i) {
    if (!(resid_precision[i] > 0.0)) throw InvalidInput("gaussian update: residual precision must be positive");
  }
  const Eigen::MatrixXd wz = resid_precision.asDiagonal() * Z;
  Eigen::MatrixXd precision = prior_precision;
  precision.noalias() += Z.transpose() * wz;
  return gaussian_from_precision(precision, wz.transpose() * y_adj);
}

template <RandomStream Stream>
Eigen::VectorXd draw_gaussian(const GaussianConditional& g, Stream& rng) {
  Eigen::VectorXd z(g.mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return g.mean + g.llt.matrixU().solve(z);
}

template <RandomStream Stream>
Eigen::VectorXd update_gaussian_coefficients(const Eigen::VectorXd& y_adj, const Eigen::MatrixXd& Z,
                                             const Eigen::VectorXd& resid_precision,
                                             const Eigen::MatrixXd& prior_precision, Stream& rng) {
  return draw_gaussian(gaussian_coefficient_conditional(y_adj, Z, resid_precision, prior_precision), rng);
}

/// Independent coordinates: x_k ~ N(linear_k / precision_k, 1 / precision_k).
template <RandomStream Stream>
Eigen::VectorXd draw_gaussian_diagonal(const Eigen::VectorXd& precision, const Eigen::VectorXd& linear_term,
                                       Stream& rng) {
  Eigen::VectorXd out(precision.size());
  for (Eigen::Index k = 0; k < precision.size(); ++k) {
    if (!(precision[k] > 0.0)) throw NumericalError("posterior precision is not positive definite");
    out[k] = linear_term[k] / precision[k] + rng.normal() / std::sqrt(precision[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variance-model (cMLG) updates
// ---------------------------------------------------------------------------

enum class VarianceBlock { coefficients, random_effects };

/// Shapes and rates of the cMLG rows, in stacking order. `data_obs[k]` is the
/// observation behind data row k; prior rows follow the data rows.
struct VarianceRows {
  Eigen::VectorXd shape;
  Eigen::VectorXd rate;
  std::vector<int> data_obs;
  Eigen::Index n_prior = 0;

  Eigen::Index n_data() const { return static_cast<Eigen::Index>(data_obs.size()); }
};

inline Eigen::VectorXd variance_linear_predictor(const ChainState& s, const ModelDesign& d) {
  Eigen::VectorXd lp = d.psi_times(s.eta2);
  if (d.X_var.cols() > 0) lp += d.X_var * s.beta2;
  return lp;
}

/// sigma2_i = exp(-(x_var_i' beta2 + eta2[area(i)])), exponent clamped.
inline Eigen::VectorXd observation_variances(const ChainState& s, const ModelDesign& d,
                                             std::size_t* clamp_events = nullptr) {
  const Eigen::VectorXd lp = variance_linear_predictor(s, d);
  Eigen::VectorXd out(lp.size());
  for (Eigen::Index i = 0; i < lp.size(); ++i) out[i] = clamped_exp(-lp[i], clamp_events);
  return out;
}

inline VarianceRows variance_rows(VarianceBlock which, const ChainState& state, const ModelDesign& design,
                                  const Eigen::VectorXd& residuals_sq, const Eigen::VectorXd& s2,
                                  std::size_t* clamp_events = nullptr) {
  const Eigen::Index n = design.n_obs();
  if (residuals_sq.size() != n || s2.size() != n) throw InvalidInput("variance rows: dimension mismatch");
  if (!(state.sigma_eta2 > 0.0)) throw InvalidInput("variance rows: sigma_eta2 must be positive");

  // The part of the linear predictor that is held fixed in this block.
  Eigen::VectorXd other;
  if (which == VarianceBlock::coefficients) {
    other = design.psi_times(state.eta2);
  } else {
    other = design.X_var.cols() > 0 ? Eigen::VectorXd(design.X_var * state.beta2) : Eigen::VectorXd::Zero(n);
  }
  Eigen::VectorXd e_other(n);
  for (Eigen::Index i = 0; i < n; ++i) e_other[i] = clamped_exp(other[i], clamp_events);

  Eigen::Index n_s2 = 0;
  for (Eigen::Index i = 0; i < n; ++i) n_s2 += design.gamma_shape[i] > 0.0 ? 1 : 0;
  const Eigen::Index n_prior = which == VarianceBlock::coefficients ? design.X_var.cols() : design.n_effects;

  VarianceRows rows;
  rows.n_prior = n_prior;
  rows.shape.resize(n + n_s2 + n_prior);
  rows.rate.resize(n + n_s2 + n_prior);
  rows.data_obs.reserve(n + n_s2);

  constexpr double kRateFloor = std::numeric_limits<double>::min();
  auto put = [&](Eigen::Index k, double shape, double rate) {
    if (!(rate >= kRateFloor)) {
      if (clamp_events) ++*clamp_events;
      rate = kRateFloor;
    }
    rows.shape[k] = shape;
    rows.rate[k] = rate;
  };

  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i, ++k) {
    const double w = design.obs_weight[i];
    put(k, 0.5 * w, 0.5 * w * residuals_sq[i] * e_other[i]);
    rows.data_obs.push_back(static_cast<int>(i));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = design.gamma_shape[i];
    if (g > 0.0) {
      put(k++, g, s2[i] * g * e_other[i]);
      rows.data_obs.push_back(static_cast<int>(i));
    }
  }
  const double alpha = design.hyper.alpha_mlg;
  for (Eigen::Index j = 0; j < n_prior; ++j, ++k) put(k, alpha, alpha);
  return rows;
}

/// Scale of the prior rows: alpha^{-1/2} / sigma.
inline double prior_row_scale(VarianceBlock which, const ChainState& state, const ModelDesign& design) {
  const double sigma = which == VarianceBlock::coefficients ? std::sqrt(design.hyper.sigma2_beta2) : state.sigma_eta2;
  return 1.0 / (std::sqrt(design.hyper.alpha_mlg) * sigma);
}

/// Full-conditional cMLG for beta2 (coefficients) or eta2 (random_effects).
inline CMLGParams build_variance_cmlg(VarianceBlock which, const ChainState& state, const ModelDesign& design,
                                      const Eigen::VectorXd& residuals_sq, const Eigen::VectorXd& s2,
                                      std::size_t* clamp_events = nullptr) {
  const VarianceRows rows = variance_rows(which, state, design, residuals_sq, s2, clamp_events);
  const Eigen::Index cols = which == VarianceBlock::coefficients ? design.X_var.cols() : design.n_effects;
  if (cols == 0) throw InvalidInput("build_variance_cmlg: block has no coefficients");

  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(rows.shape.size(), cols);
  for (Eigen::Index k = 0; k < rows.n_data(); ++k) {
    const int i = rows.data_obs[k];
    if (which == VarianceBlock::coefficients) {
      H.row(k) = design.X_var.row(i);
    } else {
      H(k, design.area_of[i]) = 1.0;
    }
  }
  const double scale = prior_row_scale(which, state, design);
  auto prior = H.bottomRows(rows.n_prior);
  if (which == VarianceBlock::random_effects && design.icar) {
    prior = scale * design.icar->root;
  } else {
    prior = scale * Eigen::MatrixXd::Identity(cols, cols);
  }
  return CMLGParams(std::move(H), rows.shape, rows.rate);
}

template <RandomStream Stream>
Eigen::VectorXd update_variance_coefficients(const CMLGParams& params, Stream& rng) {
  return sample_cmlg(params, rng);
}

/// Projection draw for the random-effects block without forming H. Uses
/// H'H = diag(row counts per area) + scale^2 S'S with S = I or the ICAR root,
/// and consumes the stream exactly as sample_cmlg on the dense H would.
template <RandomStream Stream>
Eigen::VectorXd sample_random_effect_cmlg(const VarianceRows& rows, const ChainState& state,
                                          const ModelDesign& design, Stream& rng) {
  const Eigen::VectorXd Y = sample_log_gamma_vector(rows.shape, rows.rate, rng);
  const int r = design.n_effects;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(r);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(r);
  for (Eigen::Index k = 0; k < rows.n_data(); ++k) {
    const int a = design.area_of[rows.data_obs[k]];
    rhs[a] += Y[k];
    counts[a] += 1.0;
  }
  const double scale = prior_row_scale(VarianceBlock::random_effects, state, design);
  const Eigen::VectorXd yp = Y.tail(r);
  if (!design.icar) {
    rhs += scale * yp;
    return (rhs.array() / (counts.array() + scale * scale)).matrix();
  }
  const IcarStructure& icar = *design.icar;
  rhs += scale * (icar.root * yp);
  if ((counts.array() == counts[0]).all()) {
    const Eigen::VectorXd denom = (counts[0] + scale * scale * icar.eigenvalues.array()).matrix();
    const Eigen::VectorXd u = icar.eigenvectors.transpose() * rhs;
    return icar.eigenvectors * (u.array() / denom.array()).matrix();
  }
  Eigen::MatrixXd hth = scale * scale * icar.regularized_precision();
  hth.diagonal() += counts;
  Eigen::LLT<Eigen::MatrixXd> llt(hth);
  if (llt.info() != Eigen::Success) throw NumericalError("random-effect projection: H'H not positive definite");
  return llt.solve(rhs);
}

/// sigma2 = exp(-(x' beta2 + psi' eta2)) for each observation.
inline Eigen::VectorXd sigma2_from_coefficients(const Eigen::MatrixXd& X_var, const Eigen::VectorXd& beta2,
                                                const Eigen::VectorXd& psi_eta2) {
  Eigen::VectorXd lp = psi_eta2;
  if (X_var.cols() > 0) lp += X_var * beta2;
  return (-lp.array()).exp().matrix();
}

// ---------------------------------------------------------------------------
// Scale parameters
// ---------------------------------------------------------------------------

/// sigma2_eta1 | eta1 ~ IG(a + r/2, b + eta1'eta1/2).
template <RandomStream Stream>
double update_random_effect_variance_ig(const Eigen::VectorXd& eta1, double a, double b, Stream& rng) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidInput("IG update: a and b must be positive");
  const double shape = a + 0.5 * static_cast<double>(eta1.size());
  const double scale = b + 0.5 * eta1.squaredNorm();
  return std::exp(-rng.log_gamma(shape, scale));
}

/// Structured-prior form: IG(a + r/2, b + eta1' P eta1 / 2).
template <RandomStream Stream>
double update_random_effect_variance_ig(const Eigen::VectorXd& eta1, const Eigen::MatrixXd& prior_precision,
                                        double a, double b, Stream& rng) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidInput("IG update: a and b must be positive");
  const double shape = a + 0.5 * static_cast<double>(eta1.size());
  const double scale = b + 0.5 * eta1.dot(prior_precision * eta1);
  return std::exp(-rng.log_gamma(shape, scale));
}

/// log of the sigma_eta2 conditional, up to a constant: the MLG prior of eta2
/// at V = alpha^{1/2} sigma S^{-1} plus the half-normal prior.
inline double sigma_eta2_log_target(double sigma, const Eigen::VectorXd& eta2, const ModelDesign& design) {
  if (!(sigma > 0.0)) return -std::numeric_limits<double>::infinity();
  const double alpha = design.hyper.alpha_mlg;
  const Eigen::VectorXd s_eta = design.icar ? Eigen::VectorXd(design.icar->root * eta2) : eta2;
  const double scale = 1.0 / (std::sqrt(alpha) * sigma);
  double out = -static_cast<double>(eta2.size()) * std::log(sigma) - sigma * sigma / (2.0 * design.hyper.c);
  for (Eigen::Index k = 0; k < s_eta.size(); ++k) {
    const double z = scale * s_eta[k];
    out += alpha * z - alpha * clamped_exp(z);
  }
  return out;
}

inline double standard_normal_log_cdf(double x) { return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2)); }

/// Log MH acceptance ratio for current -> proposed under the zero-truncated
/// normal random walk, Hastings correction included.
inline double sigma_eta2_log_acceptance(double current, double proposed, const Eigen::VectorXd& eta2,
                                        const ModelDesign& design, double proposal_sd) {
  return sigma_eta2_log_target(proposed, eta2, design) - sigma_eta2_log_target(current, eta2, design) +
         standard_normal_log_cdf(current / proposal_sd) - standard_normal_log_cdf(proposed / proposal_sd);
}

struct MhStep {
  double value;
  bool accepted;
};

template <RandomStream Stream>
MhStep update_sigma_eta2_mh(const ChainState& state, const ModelDesign& design, Stream& rng, double proposal_sd) {
  if (!(state.sigma_eta2 > 0.0)) throw InvalidInput("sigma_eta2 must be positive");
  if (!(proposal_sd > 0.0)) throw InvalidInput("proposal_sd must be positive");
  const double current = state.sigma_eta2;
  double proposed = 0.0;
  do {
    proposed = current + proposal_sd * rng.normal();
  } while (!(proposed > 0.0));
  const double log_ratio = sigma_eta2_log_acceptance(current, proposed, state.eta2, design, proposal_sd);
  if (std::log(rng.uniform()) < log_ratio) return {proposed, true};
  return {current, false};
}

/// theta = X_mean beta1 + Psi eta1.
inline Eigen::VectorXd update_theta(const ChainState& state, const ModelDesign& design) {
  return design.X_mean * state.beta1 + design.psi_times(state.eta1);
}

}  // namespace hetsae
