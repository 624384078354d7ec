#pragma once

// Small synthetic area-level datasets drawn from the HALM data model:
// y_i ~ N(theta_i, sigma2_i), s2_i ~ Gamma((n_i - 1)/2, rate (n_i - 1)/(2 sigma2_i)).

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "hetsae/models.hpp"
#include "hetsae/random.hpp"

namespace synthetic {

struct AreaTruth {
  Eigen::MatrixXd X;
  Eigen::VectorXd theta;
  Eigen::VectorXd sigma2;
  std::vector<int> n_samp;
};

inline AreaTruth default_truth(int d, hetsae::Rng& rng, double tau = 0.3) {
  AreaTruth t;
  t.X.resize(d, 2);
  t.theta.resize(d);
  t.sigma2.resize(d);
  t.n_samp.resize(d);
  for (int i = 0; i < d; ++i) {
    t.X(i, 0) = 1.0;
    t.X(i, 1) = rng.normal();
    t.theta[i] = 10.0 + 0.4 * t.X(i, 1) + tau * rng.normal();
    t.sigma2[i] = 0.05;
    t.n_samp[i] = 5 + static_cast<int>(rng.below(20));
  }
  return t;
}

inline hetsae::AreaDataset draw_area_data(const AreaTruth& t, hetsae::Rng& rng) {
  hetsae::AreaDataset a;
  const Eigen::Index d = t.theta.size();
  a.X = t.X;
  a.n_samp = t.n_samp;
  a.y.resize(d);
  a.s2.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    a.y[i] = t.theta[i] + std::sqrt(t.sigma2[i]) * rng.normal();
    const double g = 0.5 * (t.n_samp[i] - 1);
    a.s2[i] = std::exp(rng.log_gamma(g, g / t.sigma2[i]));
    a.area_ids.push_back("A" + std::to_string(i + 1));
  }
  return a;
}

}  // namespace synthetic
