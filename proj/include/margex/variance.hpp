#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "margex/types.hpp"

namespace margex {

// Standard normal quantile by the AS 241 rational approximation (accurate
// well beyond 1e-9).
double normal_quantile(double p);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return lo <= x && x <= hi; }
};

// estimate +/- z_{(1+level)/2} * se.
Interval wald_ci(double estimate, double se, double level);

// Asymptotic covariance of sqrt(m) (beta-hat - beta0):
// m (sum_i D' V^-1 D)^-1. Divide by m for the per-fit covariance.
Eigen::MatrixXd model_based_cov(const Dataset& dataset, const Theta& theta_hat);

// Three-factor sandwich, same sqrt(m) scale as model_based_cov.
Eigen::MatrixXd robust_cov(const Dataset& dataset, const Theta& theta_hat);

// Joint (beta, rho) sandwich from the stacked estimating functions, on the
// per-fit scale (already divided by m). The beta block decouples because the
// bread is block lower-triangular. Requires an interior rho-hat; the mixed
// second derivatives of the composite likelihood are central finite
// differences of composite_score_rho (relative step 1e-5).
Eigen::MatrixXd joint_sandwich(const Dataset& dataset, const Theta& theta_hat,
                               bool rho_boundary = false);

struct CovarianceReport {
  Eigen::MatrixXd beta_cov_model;   // per-fit covariance (asymptotic / m)
  Eigen::MatrixXd beta_cov_robust;  // per-fit sandwich
  std::optional<Eigen::MatrixXd> joint_cov;
  Eigen::VectorXd se_model;
  Eigen::VectorXd se_robust;
  std::optional<Eigen::VectorXd> rho_se;  // from the joint sandwich
  double ci_level = 0.95;
  std::vector<std::string> warnings;
};

CovarianceReport covariance_report(const Dataset& dataset, const Theta& theta_hat,
                                   double ci_level = 0.95, bool rho_boundary = false);

}  // namespace margex
