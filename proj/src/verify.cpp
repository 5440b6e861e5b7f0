#include "margex/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "margex/detail/optim.hpp"
#include "margex/estimation.hpp"
#include "margex/frailty_sim.hpp"
#include "margex/mle_oracle.hpp"
#include "margex/model_core.hpp"
#include "margex/rng.hpp"

namespace margex {

namespace {

struct Failure {
  std::ostringstream message;
  int count = 0;

  void add(const std::string& what) {
    if (count < 5) message << (count ? "; " : "") << what;
    ++count;
  }
};

CheckResult finish(const std::string& name, const Failure& failure,
                   const std::string& ok_detail) {
  if (failure.count == 0) return CheckResult{name, true, ok_detail};
  return CheckResult{name, false,
                     std::to_string(failure.count) + " violation(s): " + failure.message.str()};
}

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(6);
  s << x;
  return s.str();
}

// Monte Carlo frailty oracle for a pair: correlated standard exponentials via
// the two-Gaussian construction, Rao-Blackwellized over the Bernoulli layer:
//   pr(Y_j = Y_k = 1) = E exp(-Z_j d_j - Z_k d_k).
// Kept independent of the library sampling path on purpose.
struct PairMC {
  double estimate = 0.0;
  double std_error = 0.0;
};

PairMC mc_pairwise_prob(double eta_j, double eta_k, double rho, long n_draws,
                        std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  const double c = std::sqrt(rho);
  const double root = std::sqrt(1.0 - rho);
  const double d_j = std::exp(-eta_j);
  const double d_k = std::exp(-eta_k);

  double sum = 0.0, sum_sq = 0.0;
  for (long i = 0; i < n_draws; ++i) {
    const double g1 = normal(engine), g2 = normal(engine);
    const double g3 = normal(engine), g4 = normal(engine);
    const double w1j = g1, w1k = c * g1 + root * g2;
    const double w2j = g3, w2k = c * g3 + root * g4;
    const double z_j = 0.5 * (w1j * w1j + w2j * w2j);
    const double z_k = 0.5 * (w1k * w1k + w2k * w2k);
    const double value = std::exp(-z_j * d_j - z_k * d_k);
    sum += value;
    sum_sq += value * value;
  }
  const double n = static_cast<double>(n_draws);
  const double mean = sum / n;
  const double var = std::max(0.0, sum_sq / n - mean * mean);
  return PairMC{mean, std::sqrt(var / n)};
}

}  // namespace

CheckResult check_pairwise_kernel(std::uint64_t seed, int n_draws, long mc_draws) {
  Failure failure;
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Eigen::MatrixXd c2(2, 2);
  for (int i = 0; i < n_draws; ++i) {
    Eigen::VectorXd beta(2), x_j(2), x_k(2);
    beta << normal(engine), normal(engine);
    x_j << 1.0, 2.0 * normal(engine);
    x_k << 1.0, 2.0 * normal(engine);
    const double rho = uniform(engine);

    const double p_jk = pairwise_prob(x_j, x_k, beta, rho);
    const double p_kj = pairwise_prob(x_k, x_j, beta, rho);
    if (p_jk != p_kj) failure.add("asymmetric pairwise_prob at draw " + std::to_string(i));

    // 2x2 determinant identity.
    Eigen::MatrixXd x_rows(2, 2);
    x_rows.row(0) = x_j.transpose();
    x_rows.row(1) = x_k.transpose();
    c2 << 1.0, std::sqrt(rho), std::sqrt(rho), 1.0;
    const double p_det = joint_prob_all_ones(x_rows, beta, c2);
    if (std::abs(p_det - p_jk) > 1e-12) {
      failure.add("determinant identity off by " + fmt(p_det - p_jk));
    }

    const double p_j = marginal_prob(x_j, beta);
    const double p_k = marginal_prob(x_k, beta);
    if (p_jk > std::min(p_j, p_k) + 1e-12 ||
        p_jk < std::max(0.0, p_j + p_k - 1.0) - 1e-12) {
      failure.add("Frechet bound violated at draw " + std::to_string(i));
    }
  }

  // Monte Carlo frailty oracle on fixed configurations.
  const double configs[][3] = {
      {0.0, 0.0, 0.5}, {1.0, -0.5, 0.3}, {-1.0, 0.7, 0.8}, {0.5, 0.5, 0.0}};
  double worst_sigma = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double eta_j = configs[k][0], eta_k = configs[k][1], rho = configs[k][2];
    Eigen::VectorXd beta(1), one(1);
    beta << 1.0;
    Eigen::VectorXd x_j(1), x_k(1);
    x_j << eta_j;
    x_k << eta_k;
    const double exact = pairwise_prob(x_j, x_k, beta, rho);
    const PairMC mc = mc_pairwise_prob(eta_j, eta_k, rho, mc_draws,
                                       substream_seed(seed, 1000 + k));
    const double sigmas = std::abs(mc.estimate - exact) / std::max(mc.std_error, 1e-12);
    worst_sigma = std::max(worst_sigma, sigmas);
    if (sigmas > 3.0) {
      failure.add("MC oracle off by " + fmt(sigmas) + " sigma at config " + std::to_string(k));
    }
  }
  return finish("pairwise kernel vs determinant identity, Frechet bounds, MC oracle",
                failure, "worst MC deviation " + fmt(worst_sigma) + " sigma");
}

namespace {

// Random cluster layout of total size in [2, 7]; three-level when requested.
ClusterData random_layout(std::mt19937_64& engine, bool three_level, int label) {
  std::uniform_int_distribution<int> size_draw(2, 7);
  ClusterData cluster;
  cluster.label = label;
  const int n = size_draw(engine);
  if (!three_level) {
    cluster.observations.resize(n);
    for (int j = 0; j < n; ++j) cluster.observations[j].position = j;
    return cluster;
  }
  int remaining = n;
  int subject = 0;
  std::uniform_int_distribution<int> chunk_draw(1, 3);
  while (remaining > 0) {
    const int chunk = std::min(remaining, chunk_draw(engine));
    for (int k = 0; k < chunk; ++k) {
      Observation obs;
      obs.subject = subject;
      obs.position = k;
      cluster.observations.push_back(obs);
    }
    remaining -= chunk;
    ++subject;
  }
  return cluster;
}

void fill_covariates(ClusterData& cluster, std::mt19937_64& engine, int p) {
  std::normal_distribution<double> normal;
  for (auto& obs : cluster.observations) {
    obs.covariates.resize(p);
    obs.covariates[0] = 1.0;
    for (int c = 1; c < p; ++c) obs.covariates[c] = 2.0 * normal(engine);
  }
}

CorrelationStructure random_structure(CorrelationKind kind, std::mt19937_64& engine) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  switch (kind) {
    case CorrelationKind::Independence:
      return CorrelationStructure::independence();
    case CorrelationKind::Exchangeable:
      return CorrelationStructure::exchangeable(0.9 * uniform(engine));
    case CorrelationKind::AR1:
      return CorrelationStructure::ar1(0.9 * uniform(engine));
    case CorrelationKind::NestedExchExch: {
      const double r2 = 0.45 * uniform(engine);
      const double r3 = 0.45 * uniform(engine);
      return CorrelationStructure::nested_exch_exch(r2, r3);
    }
    case CorrelationKind::NestedExchAR1: {
      const double r2 = 0.35 * uniform(engine);
      const double r3 = 0.45 * uniform(engine);
      return CorrelationStructure::nested_exch_ar1(r2, r3);
    }
  }
  return CorrelationStructure::independence();
}

const CorrelationKind kAllKinds[] = {
    CorrelationKind::Independence, CorrelationKind::Exchangeable, CorrelationKind::AR1,
    CorrelationKind::NestedExchExch, CorrelationKind::NestedExchAR1};

const CorrelationKind kParametricKinds[] = {
    CorrelationKind::Exchangeable, CorrelationKind::AR1, CorrelationKind::NestedExchExch,
    CorrelationKind::NestedExchAR1};

}  // namespace

CheckResult check_pattern_normalization(std::uint64_t seed, int clusters_per_structure) {
  Failure failure;
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  double worst = 0.0;

  for (const auto kind : kAllKinds) {
    const bool nested = is_nested(kind);
    for (int i = 0; i < clusters_per_structure; ++i) {
      ClusterData cluster = random_layout(engine, nested, i);
      fill_covariates(cluster, engine, 2);
      Eigen::VectorXd beta(2);
      beta << normal(engine), normal(engine);

      Theta theta;
      theta.beta = beta;
      // Nested AR(1) draws can produce a non-PSD scale matrix for this
      // layout; redraw until admissible.
      for (int attempt = 0; attempt < 100; ++attempt) {
        theta.rho = random_structure(kind, engine);
        try {
          validate_scale_matrix(scale_matrix(theta.rho, cluster));
          break;
        } catch (const structure_error&) {
          continue;
        }
      }

      const int n = cluster.size();
      long double total = 0.0L;
      double min_prob = 0.0;
      for (unsigned mask = 0; mask < (1u << n); ++mask) {
        for (int j = 0; j < n; ++j) {
          cluster.observations[j].outcome = (mask >> j) & 1u;
        }
        const double prob = pattern_prob(cluster, theta);
        min_prob = std::min(min_prob, prob);
        total += prob;
      }
      const double gap = std::abs(static_cast<double>(total) - 1.0);
      worst = std::max(worst, gap);
      if (gap > 1e-10) {
        failure.add(to_string(kind) + " cluster " + std::to_string(i) +
                    ": pattern sum off by " + fmt(gap));
      }
      if (min_prob < -1e-12) {
        failure.add(to_string(kind) + " cluster " + std::to_string(i) +
                    ": pattern probability " + fmt(min_prob));
      }
    }
  }
  return finish("pattern probabilities sum to 1 over all outcomes", failure,
                "worst normalization gap " + fmt(worst));
}

CheckResult check_rho_score_gradient(std::uint64_t seed, int instances_per_structure) {
  Failure failure;
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  const double h = 1e-6;
  double worst = 0.0;

  for (const auto kind : kParametricKinds) {
    const bool nested = is_nested(kind);
    for (int i = 0; i < instances_per_structure; ++i) {
      Dataset ds;
      ds.three_level = nested;
      for (int cl = 0; cl < 5; ++cl) {
        ClusterData cluster = random_layout(engine, nested, cl);
        fill_covariates(cluster, engine, 2);
        for (auto& obs : cluster.observations) obs.outcome = coin(engine) ? 1 : 0;
        ds.clusters.push_back(std::move(cluster));
      }
      Eigen::VectorXd beta(2);
      beta << normal(engine), normal(engine);
      // Interior rho with headroom for the +/- h evaluations.
      CorrelationStructure structure = random_structure(kind, engine);
      Eigen::VectorXd rho = structure.params().cwiseMax(0.01);
      structure = structure.with_params(rho);

      const Theta theta{beta, structure};
      const Eigen::VectorXd analytic = composite_score_rho(ds, theta);
      for (int l = 0; l < structure.dim(); ++l) {
        Eigen::VectorXd rp = rho, rm = rho;
        rp[l] += h;
        rm[l] -= h;
        const double up = composite_loglik(ds, Theta{beta, structure.with_params(rp)});
        const double down = composite_loglik(ds, Theta{beta, structure.with_params(rm)});
        const double fd = (up - down) / (2.0 * h);
        const double rel =
            std::abs(analytic[l] - fd) / std::max({std::abs(analytic[l]), std::abs(fd), 1e-2});
        worst = std::max(worst, rel);
        if (rel > 1e-6) {
          failure.add(to_string(kind) + " instance " + std::to_string(i) + " coord " +
                      std::to_string(l) + ": rel err " + fmt(rel));
        }
      }
    }
  }
  return finish("composite rho score matches finite differences", failure,
                "worst relative error " + fmt(worst));
}

namespace {

// Reference logistic MLE: plain Newton on the Bernoulli log-likelihood,
// written with its own link evaluation so it exercises an independent path.
Eigen::VectorXd reference_logistic_fit(const Dataset& ds) {
  const int p = ds.n_covariates();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
    for (const auto& cluster : ds.clusters) {
      for (const auto& obs : cluster.observations) {
        const double eta = obs.covariates.dot(beta);
        const double mu = 1.0 / (1.0 + std::exp(-eta));
        score += (obs.outcome - mu) * obs.covariates;
        info += mu * (1.0 - mu) * obs.covariates * obs.covariates.transpose();
      }
    }
    const Eigen::VectorXd step = info.ldlt().solve(score);
    beta += step;
    if (score.cwiseAbs().maxCoeff() < 1e-12) break;
  }
  return beta;
}

}  // namespace

CheckResult check_oracle_equivalences(std::uint64_t seed) {
  Failure failure;

  // (a) solve_beta at rho = 0 equals the reference logistic MLE.
  DGPConfig config;
  config.beta_true.resize(2);
  config.beta_true << 1.0, -1.2;
  config.structure_true = CorrelationStructure::exchangeable(0.0);
  config.cluster_count = 300;
  config.size_law = SizeLaw{{3, 4, 5}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  config.seed = substream_seed(seed, 1);
  const Dataset independent = simulate_dataset(config);

  const Eigen::VectorXd reference = reference_logistic_fit(independent);
  const BetaSolve gee_fit =
      solve_beta(independent, CorrelationStructure::exchangeable(0.0), {});
  const double diff_a = (gee_fit.beta - reference).cwiseAbs().maxCoeff();
  if (diff_a > 1e-6) failure.add("solve_beta vs logistic MLE differs by " + fmt(diff_a));

  // (b) fit_mle with rho fixed at 0 (independence) equals the same MLE.
  const MLEResult mle = fit_mle(independent, CorrelationKind::Independence);
  const double diff_b = (mle.theta_hat.beta - reference).cwiseAbs().maxCoeff();
  if (diff_b > 1e-6) failure.add("fit_mle(indep) vs logistic MLE differs by " + fmt(diff_b));

  // (c) clusters of size 2: the full likelihood and the composite likelihood
  // are the same objective, so their maximizers must agree.
  DGPConfig pairs_config = config;
  pairs_config.structure_true = CorrelationStructure::exchangeable(0.4);
  pairs_config.cluster_count = 150;
  pairs_config.size_law = SizeLaw{{2}, {1.0}};
  pairs_config.seed = substream_seed(seed, 2);
  const Dataset pairs = simulate_dataset(pairs_config);

  const MLEResult full_fit = fit_mle(pairs, CorrelationKind::Exchangeable);
  const auto composite_objective = [&](const Eigen::VectorXd& x) {
    Theta theta;
    theta.beta = x.head(2);
    theta.rho = CorrelationStructure::exchangeable(inverse_logit(x[2]));
    try {
      return composite_loglik(pairs, theta);
    } catch (const error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  Eigen::VectorXd x0(3);
  x0 << full_fit.theta_hat.beta[0], full_fit.theta_hat.beta[1], 0.0;
  const detail::OptimResult composite_fit =
      detail::bfgs_maximize(composite_objective, x0, 3e-8, 500);
  if (!composite_fit.converged) {
    failure.add("composite-likelihood fit did not converge");
  } else {
    Eigen::VectorXd composite_theta(3);
    composite_theta << composite_fit.x[0], composite_fit.x[1],
        inverse_logit(composite_fit.x[2]);
    Eigen::VectorXd full_theta(3);
    full_theta << full_fit.theta_hat.beta[0], full_fit.theta_hat.beta[1],
        full_fit.theta_hat.rho.params()[0];
    const double diff_c = (composite_theta - full_theta).cwiseAbs().maxCoeff();
    if (diff_c > 1e-6) {
      failure.add("size-2 composite vs full likelihood fits differ by " + fmt(diff_c));
    }
  }
  return finish("oracle equivalences (logistic MLE, independence MLE, size-2 clusters)",
                failure, "max discrepancies " + fmt(diff_a) + " / " + fmt(diff_b));
}

CheckResult check_frailty_sampling(std::uint64_t seed, long n_draws) {
  Failure failure;

  // Exp(1) marginal moments and KS distance, independence layout.
  {
    ClusterData layout;
    layout.observations.resize(1);
    const ScaleFactor factor =
        gaussian_scale_matrix(CorrelationStructure::independence(), layout);
    Rng rng(substream_seed(seed, 11));
    std::vector<double> draws(n_draws);
    double mean = 0.0;
    for (long i = 0; i < n_draws; ++i) {
      draws[i] = draw_frailties(factor, rng)[0];
      mean += draws[i];
    }
    mean /= n_draws;
    double var = 0.0;
    for (double z : draws) var += (z - mean) * (z - mean);
    var /= n_draws;
    if (std::abs(mean - 1.0) > 0.005) failure.add("frailty mean " + fmt(mean));
    if (std::abs(var - 1.0) > 0.01) failure.add("frailty variance " + fmt(var));

    std::sort(draws.begin(), draws.end());
    double ks = 0.0;
    for (long i = 0; i < n_draws; ++i) {
      const double cdf = -std::expm1(-draws[i]);
      const double hi = static_cast<double>(i + 1) / n_draws - cdf;
      const double lo = cdf - static_cast<double>(i) / n_draws;
      ks = std::max({ks, hi, lo});
    }
    if (ks > 0.002) failure.add("KS statistic vs Exp(1) is " + fmt(ks));
  }

  // Pairwise correlations: elementwise square of the Gaussian scale matrix.
  const auto correlation_case = [&](const CorrelationStructure& structure,
                                    const ClusterData& layout, int j, int k,
                                    double expected, std::uint64_t stream) {
    const ScaleFactor factor = gaussian_scale_matrix(structure, layout);
    Rng rng(substream_seed(seed, stream));
    double sj = 0.0, sk = 0.0, sjj = 0.0, skk = 0.0, sjk = 0.0;
    for (long i = 0; i < n_draws; ++i) {
      const Eigen::VectorXd z = draw_frailties(factor, rng);
      sj += z[j];
      sk += z[k];
      sjj += z[j] * z[j];
      skk += z[k] * z[k];
      sjk += z[j] * z[k];
    }
    const double n = static_cast<double>(n_draws);
    const double mj = sj / n, mk = sk / n;
    const double cov = sjk / n - mj * mk;
    const double corr =
        cov / std::sqrt((sjj / n - mj * mj) * (skk / n - mk * mk));
    if (std::abs(corr - expected) > 0.01) {
      failure.add("correlation " + fmt(corr) + " (expected " + fmt(expected) + ")");
    }
  };

  {
    ClusterData pair;
    pair.observations.resize(2);
    pair.observations[0].position = 0;
    pair.observations[1].position = 1;
    correlation_case(CorrelationStructure::exchangeable(0.5), pair, 0, 1, 0.5, 21);

    ClusterData triple;
    triple.observations.resize(3);
    for (int j = 0; j < 3; ++j) triple.observations[j].position = j;
    correlation_case(CorrelationStructure::ar1(0.81), triple, 0, 1, 0.81, 22);
    correlation_case(CorrelationStructure::ar1(0.81), triple, 0, 2, 0.81 * 0.81, 23);

    ClusterData nested;
    for (int s = 0; s < 2; ++s) {
      for (int k = 0; k < 2; ++k) {
        Observation obs;
        obs.subject = s;
        obs.position = k;
        nested.observations.push_back(obs);
      }
    }
    const auto structure = CorrelationStructure::nested_exch_exch(0.3, 0.3);
    correlation_case(structure, nested, 0, 1, 0.6, 24);  // same subject
    correlation_case(structure, nested, 0, 2, 0.3, 25);  // across subjects
  }
  return finish("frailty marginals, KS distance, and pairwise correlations", failure,
                "all within tolerance");
}

std::vector<CheckResult> run_verification(std::uint64_t seed) {
  return {
      check_pairwise_kernel(substream_seed(seed, 1)),
      check_pattern_normalization(substream_seed(seed, 2)),
      check_rho_score_gradient(substream_seed(seed, 3)),
      check_oracle_equivalences(substream_seed(seed, 4)),
      check_frailty_sampling(substream_seed(seed, 5)),
  };
}

}  // namespace margex
