#pragma once

#include <Eigen/Dense>
#include <optional>

#include "margex/types.hpp"

namespace margex {

// Exact log-likelihood: sum over clusters of log pattern_prob. Cost grows as
// 2^{#zeros} per cluster; clusters above size_cap are rejected.
double full_loglik(const Dataset& dataset, const Theta& theta, int size_cap = 20);

struct MLEOptions {
  int size_cap = 20;
  int max_grad_evals = 500;
  double grad_tol = 1e-6;  // transformed scale
};

struct MLEResult {
  Theta theta_hat;
  double loglik = 0.0;
  Eigen::MatrixXd hessian_cov;  // inverse observed information at the optimum
  bool converged = false;
  int n_loglik_evals = 0;
  bool rho_boundary = false;
};

// Maximum likelihood by quasi-Newton with numeric gradients on transformed
// parameters (rho mapped to an unconstrained scale). Initialized from the
// four-step composite fit unless an explicit start is given.
MLEResult fit_mle(const Dataset& dataset, CorrelationKind kind,
                  std::optional<Theta> init = std::nullopt, const MLEOptions& options = {});

}  // namespace margex
