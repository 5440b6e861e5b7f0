#pragma once

#include <Eigen/Dense>
#include <vector>

#include "margex/types.hpp"

namespace margex {

enum class FitMode { FourStep, AlternateToConvergence };

struct SolverConfig {
  double beta_tol = 1e-8;  // sup-norm of the GEE score
  double rho_tol = 1e-8;   // sup-norm of the composite-likelihood score
  double outer_tol = 1e-8; // sup-norm of parameter increments between alternations
  int max_iter = 50;       // per estimating equation
  int max_outer = 25;      // alternations in AlternateToConvergence mode
  Eigen::VectorXd rho_init;  // empty = zeros (independence start)
  FitMode mode = FitMode::FourStep;
};

// GEE estimating function for beta and its model-based sensitivity, both
// averaged over clusters:
//   score       = m^-1 sum_i D_i' V_i^-1 (y_i - g(X_i beta))
//   sensitivity = m^-1 sum_i D_i' V_i^-1 D_i
struct GeeScore {
  Eigen::VectorXd score;
  Eigen::MatrixXd sensitivity;
};

GeeScore gee_score(const Dataset& dataset, const Theta& theta);

struct BetaSolve {
  Eigen::VectorXd beta;
  int iterations = 0;
  double score_norm = 0.0;
};

// Fisher scoring with step-halving, at a fixed correlation structure.
BetaSolve solve_beta(const Dataset& dataset, const CorrelationStructure& structure_fixed,
                     Eigen::VectorXd beta_init, const SolverConfig& config = {});

// Mean over clusters of the sum of pairwise four-cell log-likelihoods.
double composite_loglik(const Dataset& dataset, const Theta& theta);

// Analytic gradient of composite_loglik in the correlation parameters.
Eigen::VectorXd composite_score_rho(const Dataset& dataset, const Theta& theta);

struct RhoSolve {
  Eigen::VectorXd rho;
  bool boundary = false;  // solution clamped to the edge of [0, 1)
  int iterations = 0;
  double score_norm = 0.0;
};

// Composite-likelihood estimation of rho at a fixed beta: safeguarded Newton
// on an unconstrained transform with a bracketing fallback.
RhoSolve solve_rho(const Dataset& dataset, const Eigen::VectorXd& beta_fixed,
                   CorrelationKind kind, const SolverConfig& config = {});

// One (beta, rho) state per completed stage (or per alternation round).
struct StepEstimate {
  Eigen::VectorXd beta;
  Eigen::VectorXd rho;
};

struct FitIterations {
  int beta_total = 0;
  int rho_total = 0;
  int outer = 0;
};

struct FitResult {
  Theta theta_hat;
  Eigen::MatrixXd beta_cov_model;   // per-fit covariance of beta-hat
  Eigen::MatrixXd beta_cov_robust;  // sandwich counterpart
  double composite_loglik = 0.0;
  FitIterations iterations;
  bool converged = false;
  bool rho_boundary = false;
  std::vector<StepEstimate> step_trace;
};

// Four-step procedure (beta1 -> rho2 -> beta2 -> rho3) or full alternation.
FitResult fit(const Dataset& dataset, CorrelationKind kind, const SolverConfig& config = {});

// Per-cluster estimating-function contributions, stacked as rows:
// beta_scores(i, .) = D_i' V_i^-1 S_i and rho_scores(i, .) the cluster's
// composite-likelihood rho score. Used by the sandwich estimators.
struct ClusterScores {
  Eigen::MatrixXd beta_scores;  // m x p
  Eigen::MatrixXd rho_scores;   // m x q
};

ClusterScores per_cluster_scores(const Dataset& dataset, const Theta& theta);

}  // namespace margex
