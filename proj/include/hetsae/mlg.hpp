#pragma once

// Multivariate log-Gamma (MLG) family and its conditional form (cMLG).
//
// Y ~ MLG(mu, V, alpha, kappa) is Y = V log(g) + mu with g_i independent
// Gamma(alpha_i, rate kappa_i). The cMLG kernel exp{alpha' H y - kappa' exp(H y)}
// is what every variance-regression full conditional reduces to.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "hetsae/errors.hpp"
#include "hetsae/random.hpp"

namespace hetsae {

/// Largest argument passed to exp() inside MLG kernels.
inline constexpr double kMaxExponent = 700.0;

/// exp(min(x, kMaxExponent)); bumps `clamp_events` when the cap bites.
inline double clamped_exp(double x, std::size_t* clamp_events = nullptr) {
  if (x > kMaxExponent) {
    if (clamp_events) ++*clamp_events;
    return std::exp(kMaxExponent);
  }
  return std::exp(x);
}

namespace detail {

inline void require_positive(const Eigen::VectorXd& v, const char* name) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0) || !std::isfinite(v[i])) {
      throw InvalidInput(std::string(name) + "[" + std::to_string(i) +
                         "] must be positive and finite");
    }
  }
}

}  // namespace detail

class MLGParams {
 public:
  MLGParams(Eigen::VectorXd mu, Eigen::MatrixXd V, Eigen::VectorXd alpha, Eigen::VectorXd kappa)
      : mu_(std::move(mu)), V_(std::move(V)), alpha_(std::move(alpha)), kappa_(std::move(kappa)) {
    const Eigen::Index n = mu_.size();
    if (V_.rows() != n || V_.cols() != n || alpha_.size() != n || kappa_.size() != n) {
      throw InvalidInput("MLGParams: dimension mismatch");
    }
    detail::require_positive(alpha_, "alpha");
    detail::require_positive(kappa_, "kappa");
    lu_.compute(V_);
    if (!lu_.isInvertible()) throw InvalidInput("MLGParams: V is singular");
    // Confirm the solve reproduces the identity at working precision.
    const Eigen::MatrixXd check = V_ * lu_.inverse();
    const double err = (check - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff();
    if (!std::isfinite(err) || err > 1e-8) throw InvalidInput("MLGParams: V is numerically singular");
    log_abs_det_inv_ = 0.0;
    const Eigen::MatrixXd& lu = lu_.matrixLU();
    for (Eigen::Index i = 0; i < n; ++i) log_abs_det_inv_ -= std::log(std::abs(lu(i, i)));
  }

  Eigen::Index dim() const { return mu_.size(); }
  const Eigen::VectorXd& mu() const { return mu_; }
  const Eigen::MatrixXd& V() const { return V_; }
  const Eigen::VectorXd& alpha() const { return alpha_; }
  const Eigen::VectorXd& kappa() const { return kappa_; }

  /// log |det V^{-1}|
  double log_abs_det_inverse() const { return log_abs_det_inv_; }

  /// V^{-1} (y - mu)
  Eigen::VectorXd standardize(const Eigen::VectorXd& y) const { return lu_.solve(y - mu_); }

 private:
  Eigen::VectorXd mu_;
  Eigen::MatrixXd V_;
  Eigen::VectorXd alpha_;
  Eigen::VectorXd kappa_;
  Eigen::FullPivLU<Eigen::MatrixXd> lu_;
  double log_abs_det_inv_ = 0.0;
};

/// Conditional MLG with kernel exp{alpha' H y - kappa' exp(H y)}. Any centering
/// term mu* is folded into kappa at construction: kappa <- kappa * exp(-mu*).
class CMLGParams {
 public:
  static constexpr double kRankTolerance = 1e-10;

  CMLGParams(Eigen::MatrixXd H, Eigen::VectorXd alpha, Eigen::VectorXd kappa,
             const std::optional<Eigen::VectorXd>& mu_star = std::nullopt)
      : H_(std::move(H)), alpha_(std::move(alpha)), kappa_(std::move(kappa)) {
    const Eigen::Index n = H_.rows();
    if (alpha_.size() != n || kappa_.size() != n) throw InvalidInput("CMLGParams: dimension mismatch");
    if (H_.cols() == 0 || H_.cols() > n) throw InvalidInput("CMLGParams: H must have 1..rows columns");
    if (mu_star) {
      if (mu_star->size() != n) throw InvalidInput("CMLGParams: mu_star dimension mismatch");
      kappa_ = (kappa_.array() * (-mu_star->array()).exp()).matrix();
    }
    detail::require_positive(alpha_, "alpha");
    detail::require_positive(kappa_, "kappa");
    qr_.setThreshold(kRankTolerance);
    qr_.compute(H_);
    if (qr_.rank() != H_.cols()) throw InvalidInput("CMLGParams: H is rank deficient");
  }

  Eigen::Index rows() const { return H_.rows(); }
  Eigen::Index cols() const { return H_.cols(); }
  const Eigen::MatrixXd& H() const { return H_; }
  const Eigen::VectorXd& alpha() const { return alpha_; }
  const Eigen::VectorXd& kappa() const { return kappa_; }

  /// Least-squares coordinates (H'H)^{-1} H' y, computed from the QR factors.
  Eigen::VectorXd project(const Eigen::VectorXd& y) const { return qr_.solve(y); }

  /// Unnormalized log kernel at y1 (length cols()).
  double log_kernel(const Eigen::VectorXd& y1, std::size_t* clamp_events = nullptr) const {
    const Eigen::VectorXd z = H_ * y1;
    double out = alpha_.dot(z);
    for (Eigen::Index i = 0; i < z.size(); ++i) out -= kappa_[i] * clamped_exp(z[i], clamp_events);
    return out;
  }

 private:
  Eigen::MatrixXd H_;
  Eigen::VectorXd alpha_;
  Eigen::VectorXd kappa_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

/// Log density of MLG(mu, V, alpha, kappa) at y.
inline double mlg_log_density(const MLGParams& p, const Eigen::VectorXd& y,
                              std::size_t* clamp_events = nullptr) {
  if (y.size() != p.dim()) throw InvalidInput("mlg_log_density: dimension mismatch");
  const Eigen::VectorXd z = p.standardize(y);
  double out = p.log_abs_det_inverse();
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double a = p.alpha()[i];
    const double k = p.kappa()[i];
    out += a * std::log(k) - std::lgamma(a) + a * z[i] - k * clamped_exp(z[i], clamp_events);
  }
  return out;
}

/// n independent log-Gamma(alpha_i, kappa_i) variates, i.e. an MLG(0, I, alpha, kappa) draw.
template <RandomStream Stream>
Eigen::VectorXd sample_log_gamma_vector(const Eigen::VectorXd& alpha, const Eigen::VectorXd& kappa,
                                        Stream& rng) {
  Eigen::VectorXd g(alpha.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) g[i] = rng.log_gamma(alpha[i], kappa[i]);
  return g;
}

template <RandomStream Stream>
Eigen::VectorXd sample_mlg(const MLGParams& p, Stream& rng) {
  return p.V() * sample_log_gamma_vector(p.alpha(), p.kappa(), rng) + p.mu();
}

/// Projection sampler: (H'H)^{-1} H' Y with Y ~ MLG(0, I, alpha, kappa).
template <RandomStream Stream>
Eigen::VectorXd sample_cmlg(const CMLGParams& p, Stream& rng) {
  return p.project(sample_log_gamma_vector(p.alpha(), p.kappa(), rng));
}

/// MLG(c, sqrt(alpha) V, alpha 1, alpha 1), which tends to N(c, V V') as alpha grows.
inline MLGParams gaussian_approx_params(const Eigen::VectorXd& c, const Eigen::MatrixXd& V,
                                        double alpha_scalar) {
  if (!(alpha_scalar > 0.0)) throw InvalidInput("gaussian_approx_params: alpha must be positive");
  const Eigen::Index n = c.size();
  return MLGParams(c, std::sqrt(alpha_scalar) * V, Eigen::VectorXd::Constant(n, alpha_scalar),
                   Eigen::VectorXd::Constant(n, alpha_scalar));
}

}  // namespace hetsae
