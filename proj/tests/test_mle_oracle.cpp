#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "margex/estimation.hpp"
#include "margex/frailty_sim.hpp"
#include "margex/mle_oracle.hpp"
#include "margex/model_core.hpp"
#include "test_support.hpp"

using namespace margex;
using namespace margex::test;

namespace {

Dataset simulated(const std::string& scenario, std::vector<double> rho, int clusters,
                  std::uint64_t seed) {
  DGPConfig config = preset_scenario(scenario, rho);
  config.cluster_count = clusters;
  config.seed = seed;
  return simulate_dataset(config);
}

}  // namespace

TEST_CASE("full_loglik equals the Bernoulli log-likelihood for singleton clusters") {
  std::vector<ClusterData> clusters;
  for (int i = 0; i < 40; ++i) {
    clusters.push_back(cluster({obs({1.0, 0.1 * i - 2.0}, i % 2)}, i));
  }
  const Dataset ds = dataset(std::move(clusters));
  const Theta theta{vec({0.4, -0.6}), CorrelationStructure::exchangeable(0.7)};

  double bernoulli = 0.0;
  for (const auto& cl : ds.clusters) {
    const auto& o = cl.observations.front();
    const double p = inverse_logit(o.covariates.dot(theta.beta));
    bernoulli += o.outcome == 1 ? std::log(p) : std::log1p(-p);
  }
  CHECK(full_loglik(ds, theta) == doctest::Approx(bernoulli).epsilon(1e-12));
}

TEST_CASE("full_loglik equals the composite log-likelihood on size-2 clusters") {
  const Dataset ds = simulated("table1a", {0.4}, 60, 5);
  Dataset pairs = ds;
  for (auto& cl : pairs.clusters) cl.observations.resize(2);
  const Theta theta{vec({0.9, -1.0}), CorrelationStructure::exchangeable(0.35)};
  CHECK(full_loglik(pairs, theta) ==
        doctest::Approx(pairs.n_clusters() * composite_loglik(pairs, theta)).epsilon(1e-12));
}

TEST_CASE("size-3 pattern probabilities match the frailty Monte Carlo oracle") {
  ClusterData cl;
  for (int j = 0; j < 3; ++j) cl.observations.push_back(obs({0.0}, 0, j));
  Theta theta{vec({1.0}), CorrelationStructure::exchangeable(0.3)};

  // pr(1,1,1) straight from the oracle; other patterns through
  // inclusion-exclusion of oracle values would not be independent, so check
  // the all-ones and all-zeros corners empirically instead.
  const auto mc111 = mc_joint_all_ones_exchangeable(Eigen::VectorXd::Zero(3), 0.3,
                                                    2'000'000, 31);
  for (auto& o : cl.observations) o.outcome = 1;
  CHECK(std::abs(pattern_prob(cl, theta) - mc111.value) < 3.0 * mc111.std_error);

  // All zeros: simulate Bernoulli outcomes under the frailty model.
  std::mt19937_64 engine(77);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;
  const double c = std::sqrt(0.3), shared = std::sqrt(c), own = std::sqrt(1.0 - c);
  long all_zero = 0;
  const long reps = 2'000'000;
  for (long r = 0; r < reps; ++r) {
    const double g0a = normal(engine), g0b = normal(engine);
    bool any_one = false;
    for (int j = 0; j < 3; ++j) {
      const double w1 = shared * g0a + own * normal(engine);
      const double w2 = shared * g0b + own * normal(engine);
      const double z = 0.5 * (w1 * w1 + w2 * w2);
      if (uniform(engine) < std::exp(-z)) any_one = true;
    }
    if (!any_one) ++all_zero;
  }
  const double p_mc = static_cast<double>(all_zero) / reps;
  const double se = std::sqrt(p_mc * (1.0 - p_mc) / reps);
  for (auto& o : cl.observations) o.outcome = 0;
  CHECK(std::abs(pattern_prob(cl, theta) - p_mc) < 3.0 * se);
}

TEST_CASE("full_loglik is invariant to within-cluster permutation under exchangeability") {
  const Dataset ds = simulated("table1a", {0.5}, 30, 7);
  Dataset reversed = ds;
  for (auto& cl : reversed.clusters) {
    std::reverse(cl.observations.begin(), cl.observations.end());
    for (std::size_t j = 0; j < cl.observations.size(); ++j) {
      cl.observations[j].position = static_cast<int>(j);
    }
  }
  const Theta theta{vec({1.0, -1.2}), CorrelationStructure::exchangeable(0.5)};
  CHECK(std::abs(full_loglik(ds, theta) - full_loglik(reversed, theta)) < 1e-10);
}

TEST_CASE("fit_mle with rho fixed at zero equals the logistic MLE") {
  const Dataset ds = simulated("table1a", {0.0}, 150, 11);
  const Eigen::VectorXd reference = irls_logistic(ds);
  const MLEResult res = fit_mle(ds, CorrelationKind::Independence);
  CHECK(res.converged);
  CHECK((res.theta_hat.beta - reference).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fit_mle recovers the truth and zeroes the transformed gradient") {
  const Dataset ds = simulated("table1a", {0.5}, 150, 13);
  const MLEResult res = fit_mle(ds, CorrelationKind::Exchangeable);
  CHECK(res.converged);
  CHECK_FALSE(res.rho_boundary);
  CHECK(res.n_loglik_evals > 0);
  CHECK(std::abs(res.theta_hat.beta[0] - 1.0) < 0.4);
  CHECK(std::abs(res.theta_hat.beta[1] + 1.2) < 0.3);
  CHECK(std::abs(res.theta_hat.rho.params()[0] - 0.5) < 0.25);

  // Gradient on the transformed scale (beta, logit rho) at the optimum.
  const double rho_hat = res.theta_hat.rho.params()[0];
  const double w_hat = std::log(rho_hat) - std::log1p(-rho_hat);
  const auto value_at = [&](const Eigen::VectorXd& x) {
    const Theta theta{x.head(2), CorrelationStructure::exchangeable(inverse_logit(x[2]))};
    return full_loglik(ds, theta);
  };
  Eigen::VectorXd x(3);
  x << res.theta_hat.beta[0], res.theta_hat.beta[1], w_hat;
  for (int l = 0; l < 3; ++l) {
    const double h = 1e-5 * std::max(1.0, std::abs(x[l]));
    Eigen::VectorXd xp = x, xm = x;
    xp[l] += h;
    xm[l] -= h;
    CHECK(std::abs((value_at(xp) - value_at(xm)) / (2.0 * h)) < 1e-5);
  }

  // Observed-information covariance is symmetric with positive diagonal.
  CHECK((res.hessian_cov - res.hessian_cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(res.hessian_cov.diagonal().minCoeff() > 0.0);
}

TEST_CASE("fit_mle and the composite fit agree on size-2 clusters") {
  Dataset pairs = simulated("table1a", {0.4}, 120, 17);
  for (auto& cl : pairs.clusters) cl.observations.resize(2);

  const MLEResult full = fit_mle(pairs, CorrelationKind::Exchangeable);
  // Four-step composite estimation is a different estimator (GEE for beta),
  // but the maximized objectives coincide for pairs, so the full MLE must be
  // a stationary point of the composite likelihood too.
  const Theta at_mle = full.theta_hat;
  CHECK(composite_score_rho(pairs, at_mle).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fit_mle enforces the size cap") {
  std::vector<Observation> observations;
  for (int j = 0; j < 25; ++j) observations.push_back(obs({1.0, 0.1 * j}, j % 2, j));
  const Dataset ds = dataset({cluster(std::move(observations))});
  CHECK_THROWS_AS(fit_mle(ds, CorrelationKind::Exchangeable), resource_error);
}
