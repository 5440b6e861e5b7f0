#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "margex/estimation.hpp"
#include "margex/frailty_sim.hpp"
#include "margex/model_core.hpp"
#include "test_support.hpp"

using namespace margex;
using namespace margex::test;

namespace {

Dataset table1a_data(double rho, int clusters, std::uint64_t seed) {
  DGPConfig config = preset_scenario("table1a", {rho});
  config.cluster_count = clusters;
  config.seed = seed;
  return simulate_dataset(config);
}

}  // namespace

TEST_CASE("gee_score hand value on a single observation") {
  const Dataset ds = dataset({cluster({obs({1.0}, 1)})});
  Theta theta;
  theta.beta = vec({0.0});
  theta.rho = CorrelationStructure::independence();
  const GeeScore g = gee_score(ds, theta);
  CHECK(g.score[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g.sensitivity(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gee_score at rho = 0 is the logistic score") {
  const Dataset ds = table1a_data(0.5, 40, 3);
  Theta theta;
  theta.beta = vec({0.4, -0.8});
  theta.rho = CorrelationStructure::exchangeable(0.0);
  const GeeScore g = gee_score(ds, theta);

  Eigen::VectorXd logistic = Eigen::VectorXd::Zero(2);
  for (const auto& cl : ds.clusters) {
    for (const auto& o : cl.observations) {
      logistic += (o.outcome - inverse_logit(o.covariates.dot(theta.beta))) * o.covariates;
    }
  }
  logistic /= ds.n_clusters();
  CHECK((g.score - logistic).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gee_score is approximately unbiased at the truth") {
  const Dataset ds = table1a_data(0.5, 10'000, 17);
  Theta truth;
  truth.beta = vec({1.0, -1.2});
  truth.rho = CorrelationStructure::exchangeable(0.5);

  const GeeScore g = gee_score(ds, truth);
  const ClusterScores scores = per_cluster_scores(ds, truth);
  const double m = ds.n_clusters();
  for (int l = 0; l < 2; ++l) {
    const double sd = std::sqrt(scores.beta_scores.col(l).squaredNorm() / m);
    CHECK(std::abs(g.score[l]) < 3.0 * sd / std::sqrt(m));
  }
  // Same law-of-large-numbers check for the composite rho score.
  const Eigen::VectorXd rho_score = composite_score_rho(ds, truth);
  const double rho_sd = std::sqrt(scores.rho_scores.col(0).squaredNorm() / m);
  CHECK(std::abs(rho_score[0]) < 3.0 * rho_sd / std::sqrt(m));
}

TEST_CASE("solve_beta equals the logistic MLE on independence data") {
  DGPConfig config = preset_scenario("table1a", {0.0});
  config.cluster_count = 400;
  config.seed = 29;
  const Dataset ds = simulate_dataset(config);

  const Eigen::VectorXd reference = irls_logistic(ds);
  const BetaSolve solved = solve_beta(ds, CorrelationStructure::exchangeable(0.0), {});
  CHECK((solved.beta - reference).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("solve_beta symmetry: balanced two-point design gives zero") {
  const Dataset ds = dataset({
      cluster({obs({1.0, 1.0}, 1, 0)}, 0),
      cluster({obs({1.0, 1.0}, 0, 0)}, 1),
      cluster({obs({1.0, -1.0}, 1, 0)}, 2),
      cluster({obs({1.0, -1.0}, 0, 0)}, 3),
  });
  const BetaSolve solved = solve_beta(ds, CorrelationStructure::independence(), {});
  CHECK(solved.beta.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("solve_beta recovers the truth within Monte Carlo error") {
  const Dataset ds = table1a_data(0.5, 200, 31);
  const BetaSolve solved = solve_beta(ds, CorrelationStructure::exchangeable(0.5), {});
  CHECK(std::abs(solved.beta[0] - 1.0) < 3 * 0.106);
  CHECK(std::abs(solved.beta[1] + 1.2) < 3 * 0.069);
}

TEST_CASE("solve_beta reports separation") {
  // Outcomes perfectly separated on a small-scale covariate: the slope
  // must pass 1e3 before the score can reach tolerance.
  std::vector<ClusterData> clusters;
  for (int i = 0; i < 20; ++i) {
    const double x = (i % 2 == 0 ? 1.0 : -1.0) * 0.01 * (1 + i % 5);
    clusters.push_back(cluster({obs({1.0, x}, x > 0 ? 1 : 0)}, i));
  }
  const Dataset ds = dataset(std::move(clusters));
  CHECK_THROWS_AS(solve_beta(ds, CorrelationStructure::independence(), {}), separation_error);
}

TEST_CASE("composite_loglik hand value and factorization at rho = 0") {
  const Dataset single_pair =
      dataset({cluster({obs({0.0}, 1, 0), obs({0.0}, 1, 1)})});
  Theta theta;
  theta.beta = vec({1.0});
  theta.rho = CorrelationStructure::exchangeable(0.0);
  CHECK(composite_loglik(single_pair, theta) ==
        doctest::Approx(std::log(0.25)).epsilon(1e-13));

  // rho = 0: the pairwise likelihood factorizes, so the composite equals the
  // Bernoulli log-likelihood with each observation weighted by (n - 1).
  const Dataset ds = table1a_data(0.5, 30, 37);
  Theta theta2;
  theta2.beta = vec({0.7, -0.9});
  theta2.rho = CorrelationStructure::exchangeable(0.0);
  double expected = 0.0;
  for (const auto& cl : ds.clusters) {
    const int n = cl.size();
    for (const auto& o : cl.observations) {
      const double p = inverse_logit(o.covariates.dot(theta2.beta));
      expected += (n - 1) * (o.outcome == 1 ? std::log(p) : std::log1p(-p));
    }
  }
  expected /= ds.n_clusters();
  CHECK(composite_loglik(ds, theta2) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("composite_loglik peaks near the true rho") {
  const Dataset ds = table1a_data(0.5, 20'000, 41);
  const Eigen::VectorXd beta0 = vec({1.0, -1.2});
  const auto cl_at = [&](double r) {
    return composite_loglik(ds, Theta{beta0, CorrelationStructure::exchangeable(r)});
  };
  CHECK(cl_at(0.5) > cl_at(0.3));
  CHECK(cl_at(0.5) > cl_at(0.7));
}

TEST_CASE("composite_score_rho matches finite differences") {
  std::mt19937_64 engine(4343);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;
  const double h = 1e-6;

  for (int trial = 0; trial < 25; ++trial) {
    const Dataset ds = table1a_data(0.4, 8, 100 + trial);
    Theta theta;
    theta.beta = vec({normal(engine), normal(engine)});
    const double rho = 0.05 + 0.85 * uniform(engine);
    for (const auto kind : {CorrelationKind::Exchangeable, CorrelationKind::AR1}) {
      theta.rho = CorrelationStructure(kind, Eigen::VectorXd::Constant(1, rho));
      const double analytic = composite_score_rho(ds, theta)[0];
      const double up = composite_loglik(
          ds, Theta{theta.beta, CorrelationStructure(kind,
                                                     Eigen::VectorXd::Constant(1, rho + h))});
      const double down = composite_loglik(
          ds, Theta{theta.beta, CorrelationStructure(kind,
                                                     Eigen::VectorXd::Constant(1, rho - h))});
      const double fd = (up - down) / (2.0 * h);
      CHECK(std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-2}) <
            1e-6);
    }
  }
}

TEST_CASE("AR(1) pairs at lag >= 2 contribute nothing to the score at rho = 0") {
  // Positions 0 and 2 only: chain factor |lag| rho^{|lag|-1} vanishes at 0.
  const Dataset ds = dataset({cluster({obs({1.0}, 1, 0), obs({1.0}, 0, 2)})});
  Theta theta;
  theta.beta = vec({0.3});
  theta.rho = CorrelationStructure::ar1(0.0);
  CHECK(composite_score_rho(ds, theta)[0] == 0.0);

  // A lag-1 pair does contribute.
  const Dataset ds1 = dataset({cluster({obs({1.0}, 1, 0), obs({1.0}, 1, 1)})});
  CHECK(composite_score_rho(ds1, theta)[0] != 0.0);
}

TEST_CASE("solve_rho near the truth, and at the zero boundary") {
  {
    const Dataset ds = table1a_data(0.5, 4000, 53);
    const RhoSolve r = solve_rho(ds, vec({1.0, -1.2}), CorrelationKind::Exchangeable);
    CHECK_FALSE(r.boundary);
    CHECK(std::abs(r.rho[0] - 0.5) < 0.03);
  }
  {
    const Dataset ds = table1a_data(0.0, 10'000, 59);
    const RhoSolve r = solve_rho(ds, vec({1.0, -1.2}), CorrelationKind::Exchangeable);
    CHECK(r.rho[0] < 0.02);
  }
  {
    // Deterministically discordant pairs push rho-hat to the boundary.
    std::vector<ClusterData> clusters;
    for (int i = 0; i < 25; ++i) {
      clusters.push_back(cluster({obs({0.0}, 1, 0), obs({0.0}, 0, 1)}, i));
    }
    const Dataset ds = dataset(std::move(clusters));
    const RhoSolve r = solve_rho(ds, vec({1.0}), CorrelationKind::Exchangeable);
    CHECK(r.boundary);
    CHECK(r.rho[0] == 0.0);
  }
  {
    const Dataset empty_pairs = dataset({cluster({obs({1.0}, 1)})});
    CHECK_THROWS_AS(solve_rho(empty_pairs, vec({0.0}), CorrelationKind::Exchangeable),
                    argument_error);
  }
}

TEST_CASE("solve_rho nested recovers both components") {
  DGPConfig config = preset_scenario("table2", {0.3, 0.3});
  config.cluster_count = 10'000;
  config.seed = 61;
  const Dataset ds = simulate_dataset(config);
  const RhoSolve r = solve_rho(ds, vec({1.0, -1.2}), CorrelationKind::NestedExchExch);
  CHECK_FALSE(r.boundary);
  CHECK(std::abs(r.rho[0] - 0.3) < 0.05);
  CHECK(std::abs(r.rho[1] - 0.3) < 0.05);
}

TEST_CASE("fit: score norms vanish at the returned estimate") {
  const Dataset ds = table1a_data(0.5, 200, 67);
  const SolverConfig config;

  // Four-step: beta-hat2 zeroes the GEE score at rho-hat2 (its own stage) and
  // rho-hat3 zeroes the composite score at beta-hat2.
  const FitResult res = fit(ds, CorrelationKind::Exchangeable, config);
  CHECK(res.converged);
  CHECK_FALSE(res.rho_boundary);
  REQUIRE(res.step_trace.size() == 4);
  const Theta stage3{res.step_trace[2].beta,
                     CorrelationStructure::exchangeable(res.step_trace[2].rho[0])};
  CHECK(gee_score(ds, stage3).score.cwiseAbs().maxCoeff() < config.beta_tol);
  CHECK(composite_score_rho(ds, res.theta_hat).cwiseAbs().maxCoeff() < config.rho_tol);
  CHECK(std::isfinite(res.composite_loglik));
  // Covariances attached and symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(res.beta_cov_model);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_r(res.beta_cov_robust);
  CHECK(es_m.eigenvalues().minCoeff() > 0.0);
  CHECK(es_r.eigenvalues().minCoeff() > 0.0);

  // Full alternation converges to a joint root of both equations.
  SolverConfig alt = config;
  alt.mode = FitMode::AlternateToConvergence;
  const FitResult joint = fit(ds, CorrelationKind::Exchangeable, alt);
  CHECK(joint.converged);
  CHECK(gee_score(ds, joint.theta_hat).score.cwiseAbs().maxCoeff() < 10 * config.beta_tol);
  CHECK(composite_score_rho(ds, joint.theta_hat).cwiseAbs().maxCoeff() < config.rho_tol);
}

TEST_CASE("fit: four-step and full alternation roughly agree") {
  const Dataset ds = table1a_data(0.5, 200, 71);
  SolverConfig four, alt;
  four.mode = FitMode::FourStep;
  alt.mode = FitMode::AlternateToConvergence;
  const FitResult a = fit(ds, CorrelationKind::Exchangeable, four);
  const FitResult b = fit(ds, CorrelationKind::Exchangeable, alt);
  CHECK(b.converged);
  CHECK((a.theta_hat.beta - b.theta_hat.beta).cwiseAbs().maxCoeff() < 0.02);
  CHECK(std::abs(a.theta_hat.rho.params()[0] - b.theta_hat.rho.params()[0]) < 0.02);
}

TEST_CASE("fit invariance to relabeling and within-cluster permutation") {
  const Dataset ds = table1a_data(0.5, 120, 73);
  const FitResult base = fit(ds, CorrelationKind::Exchangeable);

  Dataset shuffled = ds;
  std::mt19937_64 engine(5);
  std::shuffle(shuffled.clusters.begin(), shuffled.clusters.end(), engine);
  for (std::size_t i = 0; i < shuffled.clusters.size(); ++i) {
    shuffled.clusters[i].label = static_cast<int>(i);
    std::shuffle(shuffled.clusters[i].observations.begin(),
                 shuffled.clusters[i].observations.end(), engine);
    // Positions must stay unique after the shuffle; exchangeable ignores them.
    for (std::size_t j = 0; j < shuffled.clusters[i].observations.size(); ++j) {
      shuffled.clusters[i].observations[j].position = static_cast<int>(j);
    }
  }
  const FitResult permuted = fit(shuffled, CorrelationKind::Exchangeable);
  CHECK((base.theta_hat.beta - permuted.theta_hat.beta).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::abs(base.theta_hat.rho.params()[0] - permuted.theta_hat.rho.params()[0]) <
        1e-10);
}

TEST_CASE("any fixed rho plug-in stays consistent for beta") {
  const Dataset ds = table1a_data(0.5, 2000, 79);
  for (double plug : {0.0, 0.3, 0.8}) {
    const BetaSolve solved = solve_beta(ds, CorrelationStructure::exchangeable(plug), {});
    CHECK(std::abs(solved.beta[0] - 1.0) < 3 * 0.106 / std::sqrt(10.0));
    CHECK(std::abs(solved.beta[1] + 1.2) < 3 * 0.069 / std::sqrt(10.0));
  }
}

TEST_CASE("estimated-rho weight is no less efficient than independence weight") {
  const int reps = 500;
  std::vector<double> with_rho_b1, independence_b1;
  for (int r = 0; r < reps; ++r) {
    const Dataset ds = table1a_data(0.7, 200, 9000 + r);
    const FitResult optimal = fit(ds, CorrelationKind::Exchangeable);
    const BetaSolve indep = solve_beta(ds, CorrelationStructure::exchangeable(0.0), {});
    with_rho_b1.push_back(optimal.theta_hat.beta[0]);
    independence_b1.push_back(indep.beta[0]);
  }
  const auto variance = [](const std::vector<double>& xs) {
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double v = 0.0;
    for (double x : xs) v += (x - mean) * (x - mean);
    return v / xs.size();
  };
  CHECK(variance(with_rho_b1) <= variance(independence_b1));
}

TEST_CASE("fit rejects nested structures on two-level data") {
  const Dataset ds = table1a_data(0.5, 20, 83);
  CHECK_THROWS_AS(fit(ds, CorrelationKind::NestedExchExch), structure_error);
}
