#include <gtest/gtest.h>

#include <boost/math/constants/constants.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <numeric>

#include "hetsae/mlg.hpp"
#include "oracles.hpp"

using namespace hetsae;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MLGParams scalar_mlg(double mu, double v, double a, double k) {
  return MLGParams(VectorXd::Constant(1, mu), MatrixXd::Constant(1, 1, v), VectorXd::Constant(1, a),
                   VectorXd::Constant(1, k));
}

std::vector<double> draws_1d(const MLGParams& p, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& x : out) x = sample_mlg(p, rng)[0];
  return out;
}

double skewness(const std::vector<double>& x) {
  const double m = oracle::mean(x);
  double m2 = 0, m3 = 0;
  for (double v : x) {
    m2 += (v - m) * (v - m);
    m3 += (v - m) * (v - m) * (v - m);
  }
  m2 /= x.size();
  m3 /= x.size();
  return m3 / std::pow(m2, 1.5);
}

}  // namespace

TEST(MlgDensity, UnitLogGammaAtZero) {
  EXPECT_NEAR(mlg_log_density(scalar_mlg(0, 1, 1, 1), VectorXd::Zero(1)), -1.0, 1e-14);
}

TEST(MlgDensity, ScaledStructureAtZero) {
  EXPECT_NEAR(mlg_log_density(scalar_mlg(0, 2, 1, 1), VectorXd::Zero(1)), std::log(0.5) - 1.0, 1e-14);
  EXPECT_NEAR(mlg_log_density(scalar_mlg(0, 2, 1, 1), VectorXd::Zero(1)), -1.693147, 1e-6);
}

TEST(MlgDensity, IntegratesToOneUnivariate) {
  const auto p = scalar_mlg(0, 1, 1, 1);
  const double total = oracle::integrate(
      [&](double y) { return std::exp(mlg_log_density(p, VectorXd::Constant(1, y))); }, -30.0, 10.0);
  EXPECT_NEAR(total, 1.0, 1e-8);
}

TEST(MlgDensity, IntegratesToOneForOtherShapes) {
  for (auto [mu, v, a, k] : {std::array{0.3, 0.7, 2.5, 0.4}, std::array{-1.0, 1.5, 0.5, 3.0},
                             std::array{0.0, -1.0, 4.0, 4.0}}) {
    const auto p = scalar_mlg(mu, v, a, k);
    const double total = oracle::integrate(
        [&](double y) { return std::exp(mlg_log_density(p, VectorXd::Constant(1, y))); }, -80.0, 40.0);
    EXPECT_NEAR(total, 1.0, 1e-6) << "mu=" << mu << " v=" << v << " a=" << a;
  }
}

TEST(MlgDensity, IntegratesToOneProductForm) {
  const MLGParams p(VectorXd::Zero(2), MatrixXd::Identity(2, 2), (VectorXd(2) << 1.0, 2.0).finished(),
                    (VectorXd(2) << 1.0, 3.0).finished());
  const double total = oracle::integrate(
      [&](double y1) {
        return oracle::integrate(
            [&](double y2) { return std::exp(mlg_log_density(p, (VectorXd(2) << y1, y2).finished())); }, -40.0,
            10.0);
      },
      -40.0, 10.0);
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(MlgDensity, PermutationInvariant) {
  Rng rng(11);
  const int n = 4;
  MatrixXd V = MatrixXd::Identity(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) V(i, j) += 0.3 * rng.normal();
  VectorXd mu(n), a(n), k(n), y(n);
  for (int i = 0; i < n; ++i) {
    mu[i] = rng.normal();
    a[i] = 0.5 + i;
    k[i] = 1.0 + 0.5 * i;
    y[i] = rng.normal();
  }
  Eigen::PermutationMatrix<Eigen::Dynamic> P(n);
  P.indices() << 2, 0, 3, 1;
  const MLGParams base(mu, V, a, k);
  // Relabelling coordinates permutes both sides of V, and alpha, kappa with them.
  const MatrixXd pvp = P * V * P.transpose();
  const MLGParams relabelled(P * mu, pvp, P * a, P * k);
  EXPECT_NEAR(mlg_log_density(base, y), mlg_log_density(relabelled, P * y), 1e-10);
  // Permuting only the rows of V leaves V^{-1}(y - mu) unchanged, so alpha, kappa stay put.
  const MatrixXd pv = P * V;
  const MLGParams rows(P * mu, pv, a, k);
  EXPECT_NEAR(mlg_log_density(base, y), mlg_log_density(rows, P * y), 1e-10);
}

TEST(MlgDensity, DimensionMismatchThrows) {
  EXPECT_THROW(mlg_log_density(scalar_mlg(0, 1, 1, 1), VectorXd::Zero(2)), InvalidInput);
}

TEST(MlgParamsValidation, RejectsBadParameters) {
  EXPECT_THROW(scalar_mlg(0, 0, 1, 1), InvalidInput);
  EXPECT_THROW(scalar_mlg(0, 1, 0, 1), InvalidInput);
  EXPECT_THROW(scalar_mlg(0, 1, 1, -1), InvalidInput);
  MatrixXd singular(2, 2);
  singular << 1, 2, 2, 4;
  EXPECT_THROW(MLGParams(VectorXd::Zero(2), singular, VectorXd::Ones(2), VectorXd::Ones(2)), InvalidInput);
}

TEST(MlgSampling, InjectedStreamIsDeterministic) {
  oracle::ScriptedStream s;
  const std::vector<double> g{0.5, 2.0, 3.5};
  for (double v : g) s.log_gammas.push_back(std::log(v));
  const VectorXd c = (VectorXd(3) << 1.0, -2.0, 0.25).finished();
  const MLGParams p(c, MatrixXd::Identity(3, 3), VectorXd::Ones(3), VectorXd::Ones(3));
  const VectorXd out = sample_mlg(p, s);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(out[i], std::log(g[i]) + c[i]);
}

TEST(MlgSampling, LogGammaMoments) {
  const auto x = draws_1d(scalar_mlg(0, 1, 1, 1), 1'000'000, 2024);
  EXPECT_NEAR(oracle::mean(x), boost::math::digamma(1.0), 0.01);
  EXPECT_NEAR(oracle::mean(x), -0.577216, 0.01);
  EXPECT_NEAR(oracle::variance(x), boost::math::trigamma(1.0), 0.02);
}

TEST(MlgSampling, SmallShapeMoments) {
  // Shape below one goes through the boost-by-one path.
  const double a = 0.5, k = 2.0;
  const auto x = draws_1d(scalar_mlg(0, 1, a, k), 400'000, 7);
  EXPECT_NEAR(oracle::mean(x), boost::math::digamma(a) - std::log(k), 0.01);
  EXPECT_NEAR(oracle::variance(x), boost::math::trigamma(a), 0.05);
}

TEST(MlgSampling, AffineEquivariance) {
  const int n = 3;
  MatrixXd V(n, n);
  V << 1.0, 0.2, -0.1, 0.0, 2.0, 0.3, 0.5, 0.0, 0.7;
  const VectorXd mu = (VectorXd(n) << 0.1, -0.4, 2.0).finished();
  const VectorXd a = (VectorXd(n) << 0.5, 1.5, 3.0).finished();
  const VectorXd k = (VectorXd(n) << 1.0, 2.0, 0.5).finished();
  Rng r1(99), r2(99);
  for (int t = 0; t < 50; ++t) {
    const VectorXd full = sample_mlg(MLGParams(mu, V, a, k), r1);
    const VectorXd base = sample_mlg(MLGParams(VectorXd::Zero(n), MatrixXd::Identity(n, n), a, k), r2);
    EXPECT_LT((full - (V * base + mu)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(GaussianApprox, Construction) {
  const auto p = gaussian_approx_params(VectorXd::Zero(2), MatrixXd::Identity(2, 2), 4.0);
  EXPECT_EQ(p.mu(), VectorXd::Zero(2));
  EXPECT_EQ(p.V(), (2.0 * MatrixXd::Identity(2, 2)).eval());
  EXPECT_EQ(p.alpha(), VectorXd::Constant(2, 4.0));
  EXPECT_EQ(p.kappa(), VectorXd::Constant(2, 4.0));
  EXPECT_THROW(gaussian_approx_params(VectorXd::Zero(1), MatrixXd::Identity(1, 1), 0.0), InvalidInput);
}

TEST(GaussianApprox, MeanCarriesShapeOffset) {
  // The finite-alpha mean is sqrt(a)(psi(a) - log a), about -1/(2 sqrt(a)), not 0.
  const double a = 1000.0;
  const double offset = std::sqrt(a) * (boost::math::digamma(a) - std::log(a));
  EXPECT_NEAR(offset, -0.0158, 1e-4);
  const auto x = draws_1d(gaussian_approx_params(VectorXd::Zero(1), MatrixXd::Identity(1, 1), a), 1'000'000, 5);
  EXPECT_NEAR(oracle::mean(x), offset, 0.004);
  EXPECT_NEAR(oracle::variance(x), 1.0, 0.02);
  EXPECT_NEAR(oracle::variance(x), a * boost::math::trigamma(a), 0.01);
}

TEST(GaussianApprox, SkewnessShrinksWithShape) {
  const auto lo = draws_1d(gaussian_approx_params(VectorXd::Zero(1), MatrixXd::Identity(1, 1), 10.0), 1'000'000, 8);
  const auto hi = draws_1d(gaussian_approx_params(VectorXd::Zero(1), MatrixXd::Identity(1, 1), 1000.0), 1'000'000, 9);
  EXPECT_GT(std::abs(skewness(lo)), std::abs(skewness(hi)));
}

TEST(GaussianApprox, KsDistanceNonIncreasing) {
  boost::math::normal_distribution<> z;
  auto cdf = [&](double x) { return boost::math::cdf(z, x); };
  std::vector<double> ks;
  std::uint64_t seed = 30;
  for (double a : {1e2, 1e3, 1e4}) {
    const auto x = draws_1d(gaussian_approx_params(VectorXd::Zero(1), MatrixXd::Identity(1, 1), a), 100'000, ++seed);
    ks.push_back(oracle::ks_statistic(x, cdf));
  }
  EXPECT_GE(ks[0], ks[1]);
  EXPECT_GE(ks[1], ks[2]);
}

TEST(Cmlg, IdentityProjectionReturnsDraw) {
  const VectorXd a = (VectorXd(3) << 1.0, 0.5, 2.0).finished();
  const VectorXd k = (VectorXd(3) << 1.0, 2.0, 0.5).finished();
  const CMLGParams p(MatrixXd::Identity(3, 3), a, k);
  Rng r1(4), r2(4);
  const VectorXd y = sample_cmlg(p, r1);
  const VectorXd raw = sample_log_gamma_vector(a, k, r2);
  EXPECT_LT((y - raw).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Cmlg, SquareProjectionIsSolve) {
  MatrixXd H(2, 2);
  H << 2.0, 1.0, -1.0, 3.0;
  const CMLGParams p(H, VectorXd::Ones(2), VectorXd::Ones(2));
  Rng r1(6), r2(6);
  const VectorXd y = sample_cmlg(p, r1);
  const VectorXd raw = sample_log_gamma_vector(VectorXd::Ones(2), VectorXd::Ones(2), r2);
  EXPECT_LT((y - H.lu().solve(raw)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cmlg, ProjectionIdempotent) {
  Rng rng(17);
  MatrixXd H(6, 3);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j) H(i, j) = rng.normal() * std::pow(10.0, j - 1);
  const CMLGParams p(H, VectorXd::Ones(6), VectorXd::Ones(6));
  for (int t = 0; t < 20; ++t) {
    VectorXd z(3);
    for (int j = 0; j < 3; ++j) z[j] = rng.normal();
    EXPECT_LT((p.project(H * z) - z).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Cmlg, ColumnOfOnesAveragesLogGammas) {
  const CMLGParams p(MatrixXd::Ones(2, 1), VectorXd::Ones(2), VectorXd::Ones(2));
  Rng rng(123);
  std::vector<double> x(1'000'000);
  for (auto& v : x) v = sample_cmlg(p, rng)[0];
  EXPECT_NEAR(oracle::mean(x), -boost::math::constants::euler<double>(), 0.01);
  // The kernel exp(2y - 2e^y) has a different mean; the recipe is kept as stated.
  const double kernel_mean = boost::math::digamma(2.0) - std::log(2.0);
  EXPECT_GT(std::abs(oracle::mean(x) - kernel_mean), 0.25);
}

TEST(Cmlg, MuStarFoldsIntoKappa) {
  MatrixXd H(3, 2);
  H << 1, 0, 0, 1, 1, 1;
  const VectorXd a = (VectorXd(3) << 1.0, 2.0, 0.5).finished();
  const VectorXd k = (VectorXd(3) << 1.0, 0.5, 2.0).finished();
  const VectorXd mu = (VectorXd(3) << 0.3, -1.0, 0.2).finished();
  const CMLGParams p(H, a, k, mu);
  const VectorXd y = (VectorXd(2) << 0.4, -0.2).finished();
  const VectorXd hy = H * y;
  double direct = a.dot(hy);
  for (int i = 0; i < 3; ++i) direct -= k[i] * std::exp(hy[i] - mu[i]);
  EXPECT_NEAR(p.log_kernel(y), direct, 1e-12);
}

TEST(Cmlg, RankDeficientThrows) {
  MatrixXd H(3, 2);
  H << 1, 2, 2, 4, 3, 6;
  EXPECT_THROW(CMLGParams(H, VectorXd::Ones(3), VectorXd::Ones(3)), InvalidInput);
  EXPECT_THROW(CMLGParams(MatrixXd::Ones(2, 3), VectorXd::Ones(2), VectorXd::Ones(2)), InvalidInput);
}

TEST(Clamp, CountsOverflowEvents) {
  std::size_t events = 0;
  EXPECT_EQ(clamped_exp(800.0, &events), std::exp(700.0));
  EXPECT_EQ(clamped_exp(1.0, &events), std::exp(1.0));
  EXPECT_EQ(events, 1u);
  const auto p = scalar_mlg(0, 1, 1, 1);
  events = 0;
  EXPECT_TRUE(std::isfinite(mlg_log_density(p, VectorXd::Constant(1, 1000.0), &events)));
  EXPECT_EQ(events, 1u);
}
