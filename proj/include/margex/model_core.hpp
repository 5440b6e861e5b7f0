#pragma once

#include <Eigen/Dense>

#include "margex/types.hpp"

namespace margex {

// log(1 + e^x) without overflow.
double log1pexp(double x);

// e^eta / (1 + e^eta), computed in the branch that never overflows.
double inverse_logit(double eta);

// pr(Y = 1 | x) = inverse_logit(x' beta).
double marginal_prob(const Eigen::VectorXd& x, const Eigen::VectorXd& beta);

// Log-scale distribution of a pair of outcomes sharing frailty correlation
// rho_jk, given linear predictors eta_j = x_j' beta and eta_k = x_k' beta.
//
// With a = -eta_j, b = -eta_k and den = (1-rho) e^{a+b} + e^a + e^b + 1:
//   p11 = 1/den
//   p10 = e^b ((1-rho) e^a + 1) / ((1+e^a) den)
//   p01 = e^a ((1-rho) e^b + 1) / ((1+e^b) den)
//   p00 = e^{a+b} (den + rho) / ((1+e^a)(1+e^b) den)
// Every factor is a positive sum, so each cell is evaluated on the log scale
// with no cancellation. d p11 / d rho = p11^2 e^{a+b}.
struct PairDistribution {
  double log_p11;
  double log_p10;
  double log_p01;
  double log_p00;
  double log_dp11_drho;  // log of d p11 / d rho (rho = 1 makes this finite too)

  double log_cell(int y_j, int y_k) const;
};

PairDistribution pair_distribution(double eta_j, double eta_k, double rho_jk);

// pr(Y_j = Y_k = 1 | x_j, x_k) under frailty correlation rho_jk.
double pairwise_prob(const Eigen::VectorXd& x_j, const Eigen::VectorXd& x_k,
                     const Eigen::VectorXd& beta, double rho_jk);

// Genuine model covariance matrix of the outcome vector of one cluster.
// Diagonal p_j (1 - p_j); off-diagonal p_jk - p_j p_k evaluated through the
// cancellation-free identity V_jk = rho_jk e^{a+b} / (den * den0).
Eigen::MatrixXd covariance_matrix(const ClusterData& cluster, const Theta& theta);

// Gaussian-scale matrix for a cluster: C_jk = sqrt(rho_pair(j, k)), unit
// diagonal. This is the correlation matrix of the Gaussian vectors whose
// elementwise-squared correlation is the frailty correlation.
Eigen::MatrixXd scale_matrix(const CorrelationStructure& structure,
                             const ClusterData& cluster);

// Throws structure_error unless C is symmetric, unit-diagonal and PSD
// (minimum eigenvalue >= -1e-10).
void validate_scale_matrix(const Eigen::MatrixXd& c, const std::string& context = {});

// pr(Y_j = 1 for all j) = det(I + C_S diag(e^{-x_j' beta}))^{-1}.
// C_S must be a valid Gaussian-scale (elementwise-sqrt) correlation submatrix.
double joint_prob_all_ones(const Eigen::MatrixXd& x_rows, const Eigen::VectorXd& beta,
                           const Eigen::MatrixXd& c_s);

// pr(Y = y | X) for one cluster by inclusion-exclusion over the zero set.
// Cost is 2^{#zeros} determinant evaluations; clusters above `size_cap`
// observations are rejected with resource_error.
double pattern_prob(const ClusterData& cluster, const Theta& theta, int size_cap = 20);

namespace detail {
// Inclusion-exclusion kernel shared with the exact-likelihood fitter:
// a = -X beta per observation, c = Gaussian-scale matrix of the cluster.
double pattern_prob_impl(const Eigen::VectorXd& a, const std::vector<int>& outcomes,
                         const Eigen::MatrixXd& c);
}  // namespace detail

}  // namespace margex
