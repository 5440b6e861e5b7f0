#pragma once

// Shared helpers for the unit suites. The Monte Carlo and reference fits here
// stay independent of the library code paths they are used to check.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "margex/types.hpp"

namespace margex::test {

inline Observation obs(std::initializer_list<double> covariates, int outcome,
                       int position = 0, std::optional<int> subject = std::nullopt) {
  Observation o;
  o.covariates.resize(static_cast<Eigen::Index>(covariates.size()));
  int i = 0;
  for (double c : covariates) o.covariates[i++] = c;
  o.outcome = outcome;
  o.position = position;
  o.subject = subject;
  return o;
}

inline ClusterData cluster(std::vector<Observation> observations, int label = 0) {
  ClusterData c;
  c.observations = std::move(observations);
  c.label = label;
  return c;
}

inline Dataset dataset(std::vector<ClusterData> clusters, bool three_level = false) {
  Dataset ds;
  ds.clusters = std::move(clusters);
  ds.three_level = three_level;
  ds.covariate_names.push_back("(intercept)");
  const int p = ds.n_covariates();
  for (int c = 1; c < p; ++c) ds.covariate_names.push_back("x" + std::to_string(c));
  return ds;
}

inline Eigen::VectorXd vec(std::initializer_list<double> values) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  int i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

struct MCEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo oracle for pr(Y_j = 1 for all j) under an exchangeable frailty
// correlation rho, using the shared-component Gaussian construction
// W_k = sqrt(c) G0 + sqrt(1-c) G_k with c = sqrt(rho) (so cor(W) = c and the
// frailty correlation is c^2 = rho). Rao-Blackwellized over the Bernoulli
// layer: the draw contributes prod_j exp(-Z_j d_j).
inline MCEstimate mc_joint_all_ones_exchangeable(const Eigen::VectorXd& eta, double rho,
                                                 long n_draws, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  const int n = static_cast<int>(eta.size());
  const double c = std::sqrt(rho);
  const double shared = std::sqrt(c);
  const double own = std::sqrt(1.0 - c);
  Eigen::VectorXd d = (-eta.array()).exp();

  double sum = 0.0, sum_sq = 0.0;
  for (long i = 0; i < n_draws; ++i) {
    const double g0_a = normal(engine);
    const double g0_b = normal(engine);
    double log_value = 0.0;
    for (int j = 0; j < n; ++j) {
      const double w1 = shared * g0_a + own * normal(engine);
      const double w2 = shared * g0_b + own * normal(engine);
      const double z = 0.5 * (w1 * w1 + w2 * w2);
      log_value -= z * d[j];
    }
    const double value = std::exp(log_value);
    sum += value;
    sum_sq += value * value;
  }
  const double n_d = static_cast<double>(n_draws);
  const double mean = sum / n_d;
  const double var = std::max(0.0, sum_sq / n_d - mean * mean);
  return MCEstimate{mean, std::sqrt(var / n_d)};
}

// Reference logistic fit by iteratively reweighted least squares, independent
// of the GEE solver path.
inline Eigen::VectorXd irls_logistic(const Dataset& ds) {
  const int p = ds.n_covariates();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int iter = 0; iter < 200; ++iter) {
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
    for (const auto& cl : ds.clusters) {
      for (const auto& o : cl.observations) {
        const double mu = 1.0 / (1.0 + std::exp(-o.covariates.dot(beta)));
        score += (o.outcome - mu) * o.covariates;
        info += mu * (1.0 - mu) * o.covariates * o.covariates.transpose();
      }
    }
    if (score.cwiseAbs().maxCoeff() < 1e-13) break;
    beta += info.ldlt().solve(score);
  }
  return beta;
}

}  // namespace margex::test
