#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

#include "hetsae/eval.hpp"

using namespace hetsae;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

bool same_bits(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!same_bits(a[i], b[i])) return false;
  return true;
}

void expect_identical(const MetricsTable& a, const MetricsTable& b) {
  ASSERT_EQ(a.estimators.size(), b.estimators.size());
  for (std::size_t e = 0; e < a.estimators.size(); ++e) {
    const auto &x = a.estimators[e], &y = b.estimators[e];
    EXPECT_EQ(x.estimator, y.estimator);
    EXPECT_TRUE(same_bits(x.rel_rmse, y.rel_rmse) && same_bits(x.abs_bias, y.abs_bias) &&
                same_bits(x.cov_rate, y.cov_rate) && same_bits(x.int_score, y.int_score) &&
                same_bits(x.rmse, y.rmse))
        << x.estimator;
  }
  ASSERT_EQ(a.per_area.size(), b.per_area.size());
  for (std::size_t i = 0; i < a.per_area.size(); ++i) {
    const auto &x = a.per_area[i], &y = b.per_area[i];
    EXPECT_EQ(x.area_id, y.area_id);
    EXPECT_TRUE(same_bits(x.model_rmse, y.model_rmse) && same_bits(x.direct_rmse, y.direct_rmse) &&
                same_bits(x.coverage, y.coverage) && same_bits(x.int_score, y.int_score));
  }
  ASSERT_EQ(a.replicates.size(), b.replicates.size());
  for (std::size_t k = 0; k < a.replicates.size(); ++k) {
    EXPECT_EQ(a.replicates[k].k, b.replicates[k].k);
    for (std::size_t e = 0; e < a.replicates[k].models.size(); ++e)
      EXPECT_TRUE(same_bits(a.replicates[k].models[e].point, b.replicates[k].models[e].point));
  }
}

SyntheticPopulation small_population(int d, std::uint64_t seed) {
  GenerationSpec spec;
  spec.n_areas = d;
  spec.min_size = 40;
  spec.max_size = 60;
  spec.graph = default_lattice(d);
  Rng rng(seed);
  return generate_population(spec, rng);
}

}  // namespace

TEST(IntervalScore, Examples) {
  EXPECT_EQ(interval_score(-1, 1, 0, 0.05), 2.0);
  EXPECT_EQ(interval_score(-1, 1, 2, 0.05), 42.0);
  EXPECT_EQ(interval_score(-1, 1, -2, 0.05), 42.0);
  EXPECT_EQ(interval_score(3, 3, 3, 0.1), 0.0);
  EXPECT_EQ(interval_score(-1, 1, 1, 0.05), 2.0);
}

TEST(IntervalScore, Errors) {
  EXPECT_THROW(interval_score(1, -1, 0, 0.05), InvalidInput);
  EXPECT_THROW(interval_score(-1, 1, 0, 0.0), InvalidInput);
  EXPECT_THROW(interval_score(-1, 1, 0, 1.0), InvalidInput);
}

TEST(IntervalScore, TranslationAndScaleProperties) {
  Rng rng(11);
  for (int t = 0; t < 2000; ++t) {
    const double l = 3.0 * rng.normal();
    const double u = l + std::abs(2.0 * rng.normal());
    const double th = 4.0 * rng.normal();
    const double alpha = 0.01 + 0.9 * rng.uniform();
    const double c = 5.0 * rng.normal();
    const double a = std::exp(rng.normal());
    const double base = interval_score(l, u, th, alpha);
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(interval_score(l + c, u + c, th + c, alpha), base, 1e-9 * (1.0 + base));
    EXPECT_NEAR(interval_score(a * l, a * u, a * th, alpha), a * base, 1e-9 * (1.0 + a * base));
  }
}

TEST(RmseMetrics, Identities) {
  Rng rng(3);
  const VectorXd truth = (VectorXd(3) << 1.0, -2.0, 5.0).finished();
  MatrixXd direct(6, 3);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 3; ++j) direct(k, j) = truth[j] + rng.normal();
  const MatrixXd exact = truth.transpose().replicate(6, 1);

  const auto zero = rmse_metrics(exact, truth, direct);
  EXPECT_EQ(zero.mean_rmse, 0.0);
  EXPECT_EQ(zero.mean_abs_bias, 0.0);

  const auto off = rmse_metrics(exact.array() - 0.25, truth, direct);
  for (int j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(off.rmse[j], 0.25);
    EXPECT_DOUBLE_EQ(off.abs_bias[j], 0.25);
  }

  const auto self = rmse_metrics(direct, truth, direct);
  EXPECT_TRUE((self.relative_rmse.array() == 1.0).all());
  EXPECT_EQ(self.mean_relative_rmse, 1.0);
}

TEST(RmseMetrics, KnownValuesAndPermutationInvariance) {
  const VectorXd truth = VectorXd::Constant(1, 0.0);
  const MatrixXd est = (MatrixXd(4, 1) << 1, -1, 3, 1).finished();
  const MatrixXd dir = (MatrixXd(4, 1) << 2, 2, -2, -2).finished();
  const auto m = rmse_metrics(est, truth, dir);
  EXPECT_DOUBLE_EQ(m.rmse[0], std::sqrt(3.0));
  EXPECT_DOUBLE_EQ(m.abs_bias[0], 1.0);
  EXPECT_DOUBLE_EQ(m.direct_rmse[0], 2.0);
  EXPECT_DOUBLE_EQ(m.relative_rmse[0], std::sqrt(3.0) / 2.0);
  EXPECT_EQ(m.direct_abs_bias[0], 0.0);

  Rng rng(5);
  MatrixXd a(10, 4), b(10, 4);
  for (int k = 0; k < 10; ++k)
    for (int j = 0; j < 4; ++j) {
      a(k, j) = rng.normal();
      b(k, j) = rng.normal();
    }
  std::vector<int> order(10);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  MatrixXd pa(10, 4), pb(10, 4);
  for (int k = 0; k < 10; ++k) {
    pa.row(k) = a.row(order[k]);
    pb.row(k) = b.row(order[k]);
  }
  const VectorXd t = VectorXd::Zero(4);
  const auto r1 = rmse_metrics(a, t, b), r2 = rmse_metrics(pa, t, pb);
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(r1.rmse[j], r2.rmse[j], 1e-14);
    EXPECT_NEAR(r1.relative_rmse[j], r2.relative_rmse[j], 1e-14);
    EXPECT_NEAR(r1.abs_bias[j], r2.abs_bias[j], 1e-14);
  }
}

TEST(RmseMetrics, ZeroDirectRmseExcludedWithWarning) {
  const VectorXd truth = (VectorXd(2) << 1.0, 2.0).finished();
  const MatrixXd direct = (MatrixXd(2, 2) << 1.0, 3.0, 1.0, 1.0).finished();
  const MatrixXd est = (MatrixXd(2, 2) << 1.5, 2.5, 0.5, 1.5).finished();
  const auto m = rmse_metrics(est, truth, direct);
  EXPECT_TRUE(std::isnan(m.relative_rmse[0]));
  EXPECT_DOUBLE_EQ(m.mean_relative_rmse, 0.5);
  ASSERT_EQ(m.warnings.size(), 1u);
  EXPECT_NE(m.warnings[0].find("area 0"), std::string::npos);
  EXPECT_THROW(rmse_metrics(MatrixXd(0, 2), truth, MatrixXd(0, 2)), InvalidInput);
  EXPECT_THROW(rmse_metrics(est, VectorXd::Zero(3), direct), InvalidInput);
}

TEST(Coverage, Examples) {
  const VectorXd truth = (VectorXd(1) << 0.3).finished();
  const auto wide = coverage_rate(MatrixXd::Constant(5, 1, -1e15), MatrixXd::Constant(5, 1, 1e15), truth);
  EXPECT_EQ(wide.mean, 1.0);
  const auto point = coverage_rate(MatrixXd::Constant(3, 1, 0.3), MatrixXd::Constant(3, 1, 0.3), truth);
  EXPECT_EQ(point.mean, 1.0);
  const MatrixXd lo = (MatrixXd(4, 1) << 0, 0, 0, 0.5).finished();
  const MatrixXd hi = (MatrixXd(4, 1) << 1, 1, 1, 1).finished();
  EXPECT_EQ(coverage_rate(lo, hi, truth).mean, 0.75);
  EXPECT_THROW(coverage_rate(lo, MatrixXd::Ones(3, 1), truth), InvalidInput);
}

TEST(EffectiveSampleSize, IndependentAndAutocorrelated) {
  Rng rng(21);
  const int n = 40000;
  VectorXd iid(n), ar(n);
  double x = 0.0;
  const double rho = 0.9;
  for (int i = 0; i < n; ++i) {
    iid[i] = rng.normal();
    x = rho * x + std::sqrt(1 - rho * rho) * rng.normal();
    ar[i] = x;
  }
  EXPECT_GT(effective_sample_size(iid), 0.8 * n);
  const double expected = n * (1 - rho) / (1 + rho);
  EXPECT_NEAR(effective_sample_size(ar), expected, 0.25 * expected);
  EXPECT_EQ(effective_sample_size(VectorXd::Constant(10, 2.0)), 10.0);
}

TEST(Aggregate, DirectRowIsExactlyOne) {
  std::vector<ReplicateResult> reps;
  for (int k = 3; k >= 1; --k) {
    ReplicateResult r;
    r.k = k;
    r.truth = VectorXd::Zero(2);
    r.direct = {VectorXd::Random(2), VectorXd::Constant(2, -1), VectorXd::Constant(2, 1)};
    r.models.push_back({VectorXd::Constant(2, 0.1 * k), VectorXd::Constant(2, 0.5), VectorXd::Constant(2, 1.0)});
    reps.push_back(r);
  }
  const auto t = aggregate_replicates(reps, {ModelKind::FH}, {"a", "b"}, 0.95);
  ASSERT_EQ(t.estimators.size(), 2u);
  EXPECT_EQ(t.estimators[0].estimator, "direct");
  EXPECT_EQ(t.estimators[0].rel_rmse, 1.0);
  EXPECT_EQ(t.estimators[0].cov_rate, 1.0);
  EXPECT_EQ(t.estimators[0].int_score, 2.0);
  EXPECT_EQ(t.estimators[1].cov_rate, 0.0);
  EXPECT_NEAR(t.estimators[1].int_score, 0.5 + 40.0 * 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(t.estimators[1].abs_bias, 0.2);
  EXPECT_EQ(t.replicates.front().k, 1);
  EXPECT_EQ(t.per_area.size(), 4u);
}

TEST(ReplicationStudy, SingleReplicateReducesToErrorRatio) {
  const auto pop = small_population(6, 4);
  StudyConfig cfg;
  cfg.K = 1;
  cfg.n_per_area = 4;
  cfg.estimators = {ModelKind::HALM};
  cfg.fit.iterations = 400;
  cfg.fit.burn_in = 100;
  const auto t = run_replication_study(pop, cfg);
  ASSERT_EQ(t.replicates.size(), 1u);
  const auto& r = t.replicates[0];
  for (int a = 0; a < pop.d; ++a) {
    const double expected = std::abs(r.models[0].point[a] - r.truth[a]) / std::abs(r.direct.point[a] - r.truth[a]);
    EXPECT_NEAR(t.per_area[pop.d + a].model_rmse / t.per_area[pop.d + a].direct_rmse, expected, 1e-12);
  }
  EXPECT_EQ(t.estimators[0].rel_rmse, 1.0);
}

TEST(ReplicationStudy, ParallelismDoesNotChangeResults) {
  const auto pop = small_population(6, 5);
  StudyConfig cfg;
  cfg.K = 5;
  cfg.n_per_area = 4;
  cfg.estimators = {ModelKind::FH, ModelKind::HALM, ModelKind::SHALM, ModelKind::PL_BULM, ModelKind::HULM};
  cfg.fit.iterations = 200;
  cfg.fit.burn_in = 50;
  cfg.base_seed = 77;
  cfg.parallelism = 1;
  const auto serial = run_replication_study(pop, cfg);
  cfg.parallelism = 8;
  const auto parallel = run_replication_study(pop, cfg);
  expect_identical(serial, parallel);
  cfg.base_seed = 78;
  const auto other = run_replication_study(pop, cfg);
  EXPECT_NE(other.estimators[1].rmse, serial.estimators[1].rmse);
}

TEST(ReplicationStudy, PpsDesignRuns) {
  const auto pop = small_population(6, 6);
  StudyConfig cfg;
  cfg.K = 2;
  cfg.design = DesignKind::poisson_pps;
  cfg.expected_n = 40;
  cfg.estimators = {ModelKind::FH};
  cfg.fit.iterations = 200;
  cfg.fit.burn_in = 50;
  const auto t = run_replication_study(pop, cfg);
  EXPECT_EQ(t.replicates.size() + t.failed_replicates, 2u);
  EXPECT_TRUE(std::isfinite(t.estimators[1].rmse));
}

TEST(ReplicationStudy, FailuresAreCountedAndAllFailedThrows) {
  auto pop = small_population(6, 7);
  pop.graph.reset();
  StudyConfig cfg;
  cfg.K = 2;
  cfg.estimators = {ModelKind::SHALM};
  cfg.fit.iterations = 100;
  cfg.fit.burn_in = 10;
  EXPECT_THROW(run_replication_study(pop, cfg), NumericalError);
  cfg.K = 0;
  EXPECT_THROW(run_replication_study(pop, cfg), InvalidInput);
}
