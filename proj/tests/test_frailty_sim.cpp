#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "margex/frailty_sim.hpp"
#include "margex/model_core.hpp"
#include "test_support.hpp"

using namespace margex;
using namespace margex::test;

namespace {

ClusterData flat_layout(int n) {
  ClusterData c;
  c.observations.resize(n);
  for (int j = 0; j < n; ++j) c.observations[j].position = j;
  return c;
}

}  // namespace

TEST_CASE("gaussian_scale_matrix entries") {
  CHECK(gaussian_scale_matrix(CorrelationStructure::independence(), flat_layout(3))
            .c.isIdentity(0.0));

  const auto exch = gaussian_scale_matrix(CorrelationStructure::exchangeable(0.25),
                                          flat_layout(3));
  CHECK(exch.c(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(exch.c(1, 2) == doctest::Approx(0.5).epsilon(1e-15));

  const auto ar1 = gaussian_scale_matrix(CorrelationStructure::ar1(0.81), flat_layout(3));
  CHECK(ar1.c(0, 1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(ar1.c(0, 2) == doctest::Approx(0.81).epsilon(1e-15));
  // The factor reproduces C.
  CHECK((ar1.cholesky * ar1.cholesky.transpose() - ar1.c).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("gaussian_scale_matrix rejects a non-PSD layout") {
  // Nested AR(1) with rho2 + rho3 = 1: within-subject lag-1 scale hits 1
  // while lag-2 does not, which is not a valid Gaussian correlation.
  ClusterData layout;
  for (int k = 0; k < 3; ++k) {
    Observation o;
    o.subject = 0;
    o.position = k;
    layout.observations.push_back(o);
  }
  CHECK_THROWS_AS(
      gaussian_scale_matrix(CorrelationStructure::nested_exch_ar1(0.8, 0.2), layout),
      structure_error);
}

TEST_CASE("frailty marginals are standard exponential") {
  const auto factor = gaussian_scale_matrix(CorrelationStructure::independence(),
                                            flat_layout(1));
  Rng rng(20260810);
  const long n = 1'000'000;
  std::vector<double> draws(n);
  double mean = 0.0;
  for (long i = 0; i < n; ++i) {
    draws[i] = draw_frailties(factor, rng)[0];
    mean += draws[i];
  }
  mean /= n;
  double var = 0.0;
  for (double z : draws) var += (z - mean) * (z - mean);
  var /= n;
  CHECK(std::abs(mean - 1.0) < 0.005);
  CHECK(std::abs(var - 1.0) < 0.01);

  std::sort(draws.begin(), draws.end());
  double ks = 0.0;
  for (long i = 0; i < n; ++i) {
    const double cdf = -std::expm1(-draws[i]);
    ks = std::max({ks, (i + 1.0) / n - cdf, cdf - static_cast<double>(i) / n});
  }
  CHECK(ks < 0.002);
}

TEST_CASE("frailty correlation is the elementwise square of C") {
  const auto factor = gaussian_scale_matrix(CorrelationStructure::exchangeable(0.5),
                                            flat_layout(2));
  Rng rng(555);
  const long n = 1'000'000;
  double s0 = 0, s1 = 0, s00 = 0, s11 = 0, s01 = 0;
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd z = draw_frailties(factor, rng);
    s0 += z[0];
    s1 += z[1];
    s00 += z[0] * z[0];
    s11 += z[1] * z[1];
    s01 += z[0] * z[1];
  }
  const double m0 = s0 / n, m1 = s1 / n;
  const double corr =
      (s01 / n - m0 * m1) / std::sqrt((s00 / n - m0 * m0) * (s11 / n - m1 * m1));
  CHECK(std::abs(corr - 0.5) < 0.01);
}

TEST_CASE("simulate_dataset reproduces the marginal logistic law") {
  for (const auto kind : {DGPKind::FrailtyModel, DGPKind::MisspecifiedLatentLogistic}) {
    DGPConfig config;
    config.kind = kind;
    config.beta_true = vec({1.0, -1.2});
    config.structure_true = CorrelationStructure::exchangeable(0.5);
    config.cluster_count = 80'000;
    config.size_law = SizeLaw{{5, 6, 7}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
    config.seed = kind == DGPKind::FrailtyModel ? 11 : 12;
    const Dataset ds = simulate_dataset(config);

    long hits = 0, count = 0;
    for (const auto& cluster : ds.clusters) {
      for (const auto& o : cluster.observations) {
        if (std::abs(o.covariates[1]) <= 0.1) {
          ++count;
          hits += o.outcome;
        }
      }
    }
    REQUIRE(count > 10'000);
    const double empirical = static_cast<double>(hits) / count;
    CHECK(std::abs(empirical - inverse_logit(1.0)) < 0.01);
  }
}

TEST_CASE("simulated outcome correlation closes the loop with covariance_matrix") {
  // Fixed covariates; empirical cor(Y_j, Y_k) should match the model kernel.
  Theta theta;
  theta.beta = vec({1.0, -1.2});
  theta.rho = CorrelationStructure::exchangeable(0.5);
  ClusterData pair;
  pair.observations.push_back(obs({1.0, 0.5}, 0, 0));
  pair.observations.push_back(obs({1.0, -0.3}, 0, 1));

  const Eigen::MatrixXd v = covariance_matrix(pair, theta);
  const double model_corr = v(0, 1) / std::sqrt(v(0, 0) * v(1, 1));

  const auto factor = gaussian_scale_matrix(theta.rho, pair);
  const double d0 = std::exp(-pair.observations[0].covariates.dot(theta.beta));
  const double d1 = std::exp(-pair.observations[1].covariates.dot(theta.beta));
  Rng rng(777);
  const long n = 1'000'000;
  double s0 = 0, s1 = 0, s00 = 0, s11 = 0, s01 = 0;
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd z = draw_frailties(factor, rng);
    const int y0 = rng.uniform() < std::exp(-z[0] * d0) ? 1 : 0;
    const int y1 = rng.uniform() < std::exp(-z[1] * d1) ? 1 : 0;
    s0 += y0;
    s1 += y1;
    s00 += y0 * y0;
    s11 += y1 * y1;
    s01 += static_cast<double>(y0) * y1;
  }
  const double m0 = s0 / n, m1 = s1 / n;
  const double empirical_corr =
      (s01 / n - m0 * m1) / std::sqrt((s00 / n - m0 * m0) * (s11 / n - m1 * m1));
  CHECK(std::abs(empirical_corr - model_corr) < 0.01);
}

TEST_CASE("simulate_dataset determinism") {
  DGPConfig config = preset_scenario("table1a", {0.5});
  config.cluster_count = 50;
  config.seed = 99;
  const Dataset a = simulate_dataset(config);
  const Dataset b = simulate_dataset(config);
  config.seed = 100;
  const Dataset c = simulate_dataset(config);

  REQUIRE(a.clusters.size() == b.clusters.size());
  bool identical = true, differs_from_c = false;
  for (std::size_t i = 0; i < a.clusters.size(); ++i) {
    const auto& ca = a.clusters[i].observations;
    const auto& cb = b.clusters[i].observations;
    REQUIRE(ca.size() == cb.size());
    for (std::size_t j = 0; j < ca.size(); ++j) {
      identical = identical && ca[j].outcome == cb[j].outcome &&
                  ca[j].covariates == cb[j].covariates && ca[j].position == cb[j].position;
    }
    if (i < c.clusters.size()) {
      const auto& cc = c.clusters[i].observations;
      if (ca.size() != cc.size()) {
        differs_from_c = true;
      } else {
        for (std::size_t j = 0; j < ca.size(); ++j) {
          if (ca[j].outcome != cc[j].outcome || ca[j].covariates != cc[j].covariates) {
            differs_from_c = true;
          }
        }
      }
    }
  }
  CHECK(identical);
  CHECK(differs_from_c);
}

TEST_CASE("preset_scenario shapes") {
  const DGPConfig t1a = preset_scenario("table1a", {0.5});
  CHECK(t1a.cluster_count == 200);
  CHECK(t1a.structure_true.kind() == CorrelationKind::Exchangeable);
  CHECK(t1a.beta_true[0] == 1.0);
  CHECK(t1a.beta_true[1] == -1.2);
  CHECK(t1a.covariate_sd == 2.0);
  CHECK(t1a.size_law.values == std::vector<int>{5, 6, 7});

  const DGPConfig t1b = preset_scenario("table1b", {0.3});
  CHECK(t1b.structure_true.kind() == CorrelationKind::AR1);

  const DGPConfig t2 = preset_scenario("table2", {0.3, 0.3});
  CHECK(t2.three_level());
  CHECK(t2.structure_true.kind() == CorrelationKind::NestedExchExch);
  CHECK(t2.size_law.probs == std::vector<double>{0.8, 0.2});

  const DGPConfig t3 = preset_scenario("table3", {});
  CHECK(t3.kind == DGPKind::MisspecifiedLatentLogistic);

  CHECK_THROWS_AS(preset_scenario("table9", {}), argument_error);
  CHECK_THROWS_AS(preset_scenario("table3", {0.5}), argument_error);
  CHECK_THROWS_AS(preset_scenario("table1a", {}), argument_error);
}

TEST_CASE("three-level simulation layout") {
  DGPConfig config = preset_scenario("table2", {0.3, 0.3});
  config.cluster_count = 300;
  config.seed = 5;
  const Dataset ds = simulate_dataset(config);
  CHECK(ds.three_level);
  bool saw_two = false, saw_three = false;
  for (const auto& cluster : ds.clusters) {
    REQUIRE(cluster.three_level());
    int max_subject = 0;
    for (const auto& o : cluster.observations) {
      max_subject = std::max(max_subject, o.subject.value_or(0));
    }
    if (max_subject == 1) saw_two = true;
    if (max_subject == 2) saw_three = true;
    CHECK(cluster.size() >= 4);
    CHECK(cluster.size() <= 9);
  }
  CHECK(saw_two);
  CHECK(saw_three);
  CHECK_NOTHROW(ds.validate());
}
