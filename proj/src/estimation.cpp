#include "margex/estimation.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "margex/model_core.hpp"

namespace margex {

namespace {

constexpr double kSeparationNorm = 1e3;

double logit(double p) { return std::log(p) - std::log1p(-p); }

// D_i' V_i^-1 applied through an LDLT solve; never an explicit inverse.
struct ClusterWork {
  Eigen::MatrixXd d;        // n x p, rows g'(eta_j) x_j'
  Eigen::VectorXd residual; // y - g(eta)
  Eigen::LDLT<Eigen::MatrixXd> v_ldlt;
};

ClusterWork cluster_work(const ClusterData& cluster, const Theta& theta) {
  const int n = cluster.size();
  const int p = static_cast<int>(theta.beta.size());
  ClusterWork w;
  w.d.resize(n, p);
  w.residual.resize(n);
  for (int j = 0; j < n; ++j) {
    const auto& obs = cluster.observations[j];
    const double mu = inverse_logit(obs.covariates.dot(theta.beta));
    w.d.row(j) = mu * (1.0 - mu) * obs.covariates.transpose();
    w.residual[j] = obs.outcome - mu;
  }
  const Eigen::MatrixXd v = covariance_matrix(cluster, theta);
  w.v_ldlt.compute(v);
  const auto& diag = w.v_ldlt.vectorD();
  const double dmin = diag.minCoeff();
  const double dmax = diag.maxCoeff();
  if (w.v_ldlt.info() != Eigen::Success || !(dmin > 0.0) || dmax / dmin > 1e12) {
    throw numeric_error("cluster " + std::to_string(cluster.label) +
                        ": outcome covariance matrix is singular or ill-conditioned");
  }
  return w;
}

double sup_norm(const Eigen::VectorXd& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

}  // namespace

GeeScore gee_score(const Dataset& dataset, const Theta& theta) {
  const int p = static_cast<int>(theta.beta.size());
  const int m = dataset.n_clusters();
  if (m == 0) throw argument_error("gee_score: empty dataset");

  GeeScore out;
  out.score = Eigen::VectorXd::Zero(p);
  out.sensitivity = Eigen::MatrixXd::Zero(p, p);
  for (const auto& cluster : dataset.clusters) {
    const ClusterWork w = cluster_work(cluster, theta);
    out.score.noalias() += w.d.transpose() * w.v_ldlt.solve(w.residual);
    out.sensitivity.noalias() += w.d.transpose() * w.v_ldlt.solve(w.d);
  }
  out.score /= m;
  out.sensitivity /= m;
  out.sensitivity = 0.5 * (out.sensitivity + out.sensitivity.transpose()).eval();
  return out;
}

BetaSolve solve_beta(const Dataset& dataset, const CorrelationStructure& structure_fixed,
                     Eigen::VectorXd beta_init, const SolverConfig& config) {
  const int p = dataset.n_covariates();
  if (beta_init.size() == 0) beta_init = Eigen::VectorXd::Zero(p);
  if (beta_init.size() != p || !beta_init.allFinite()) {
    throw argument_error("solve_beta: beta_init has the wrong dimension or is not finite");
  }

  Eigen::VectorXd beta = std::move(beta_init);
  std::vector<double> trace;
  GeeScore g = gee_score(dataset, Theta{beta, structure_fixed});
  for (int iter = 0; iter < config.max_iter; ++iter) {
    const double norm = sup_norm(g.score);
    trace.push_back(norm);
    if (norm < config.beta_tol) return BetaSolve{beta, iter, norm};

    Eigen::LDLT<Eigen::MatrixXd> ldlt(g.sensitivity);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
      throw numeric_error("solve_beta: singular sensitivity matrix");
    }
    const Eigen::VectorXd step = ldlt.solve(g.score);

    double scale = 1.0;
    Eigen::VectorXd candidate;
    GeeScore g_candidate;
    for (int halving = 0; halving <= 10; ++halving) {
      candidate = beta + scale * step;
      if (sup_norm(candidate) > kSeparationNorm) {
        throw separation_error("solve_beta: coefficients diverging (data separation?)");
      }
      g_candidate = gee_score(dataset, Theta{candidate, structure_fixed});
      if (sup_norm(g_candidate.score) < norm) break;
      scale *= 0.5;
    }
    beta = std::move(candidate);
    g = std::move(g_candidate);
  }
  if (sup_norm(g.score) < config.beta_tol) {
    return BetaSolve{beta, config.max_iter, sup_norm(g.score)};
  }
  throw convergence_error("solve_beta: no convergence in " + std::to_string(config.max_iter) +
                              " iterations",
                          trace);
}

namespace {

// Shared pair loop: calls fn(cluster, j, k, dist, rho_grad_needed) once per
// within-cluster pair. Returns the number of clusters.
template <typename Fn>
int for_each_pair(const Dataset& dataset, const Theta& theta, Fn&& fn) {
  const int m = dataset.n_clusters();
  if (m == 0) throw argument_error("composite likelihood: empty dataset");
  for (int i = 0; i < m; ++i) {
    const auto& cluster = dataset.clusters[i];
    const int n = cluster.size();
    Eigen::VectorXd eta(n);
    for (int j = 0; j < n; ++j) {
      eta[j] = cluster.observations[j].covariates.dot(theta.beta);
    }
    for (int j = 0; j < n; ++j) {
      for (int k = j + 1; k < n; ++k) {
        const double rho =
            rho_pair(theta.rho, cluster.observations[j], cluster.observations[k]);
        fn(i, cluster, j, k, pair_distribution(eta[j], eta[k], rho));
      }
    }
  }
  return m;
}

double checked_log_cell(const PairDistribution& dist, const ClusterData& cluster, int j,
                        int k) {
  const double lc =
      dist.log_cell(cluster.observations[j].outcome, cluster.observations[k].outcome);
  if (!std::isfinite(lc)) {
    throw domain_error("composite likelihood: nonpositive pair cell probability in cluster " +
                       std::to_string(cluster.label));
  }
  return lc;
}

// Signed d log(cell) / d rho_jk: +p11^2 e^{a+b}/cell for concordant cells,
// negative for discordant ones.
double cell_score(const PairDistribution& dist, int y_j, int y_k) {
  const double value = std::exp(dist.log_dp11_drho - dist.log_cell(y_j, y_k));
  return y_j == y_k ? value : -value;
}

}  // namespace

double composite_loglik(const Dataset& dataset, const Theta& theta) {
  double total = 0.0;
  const int m = for_each_pair(dataset, theta,
                              [&](int, const ClusterData& cluster, int j, int k,
                                  const PairDistribution& dist) {
                                total += checked_log_cell(dist, cluster, j, k);
                              });
  return total / m;
}

Eigen::VectorXd composite_score_rho(const Dataset& dataset, const Theta& theta) {
  const int q = theta.rho.dim();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(q);
  const int m = for_each_pair(
      dataset, theta,
      [&](int, const ClusterData& cluster, int j, int k, const PairDistribution& dist) {
        checked_log_cell(dist, cluster, j, k);
        const auto& oj = cluster.observations[j];
        const auto& ok = cluster.observations[k];
        score.noalias() +=
            cell_score(dist, oj.outcome, ok.outcome) * rho_pair_gradient(theta.rho, oj, ok);
      });
  return score / m;
}

ClusterScores per_cluster_scores(const Dataset& dataset, const Theta& theta) {
  const int m = dataset.n_clusters();
  const int p = static_cast<int>(theta.beta.size());
  const int q = theta.rho.dim();
  ClusterScores out;
  out.beta_scores = Eigen::MatrixXd::Zero(m, p);
  out.rho_scores = Eigen::MatrixXd::Zero(m, q);
  for (int i = 0; i < m; ++i) {
    const ClusterWork w = cluster_work(dataset.clusters[i], theta);
    out.beta_scores.row(i) = (w.d.transpose() * w.v_ldlt.solve(w.residual)).transpose();
  }
  if (q > 0) {
    for_each_pair(dataset, theta,
                  [&](int i, const ClusterData& cluster, int j, int k,
                      const PairDistribution& dist) {
                    const auto& oj = cluster.observations[j];
                    const auto& ok = cluster.observations[k];
                    out.rho_scores.row(i) +=
                        (cell_score(dist, oj.outcome, ok.outcome) *
                         rho_pair_gradient(theta.rho, oj, ok))
                            .transpose();
                  });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rho solvers
// ---------------------------------------------------------------------------

namespace {

constexpr double kRhoMax = 1.0 - 1e-6;

long count_pairs(const Dataset& dataset) {
  long pairs = 0;
  for (const auto& c : dataset.clusters) {
    pairs += static_cast<long>(c.size()) * (c.size() - 1) / 2;
  }
  return pairs;
}

// Scalar families: bracket the score's sign change on a grid, then refine by
// Newton on the logit scale with bisection whenever a step leaves the bracket.
RhoSolve solve_rho_scalar(const Dataset& dataset, const Eigen::VectorXd& beta,
                          CorrelationKind kind, const SolverConfig& config) {
  const auto score_at = [&](double r) {
    const CorrelationStructure s(kind, Eigen::VectorXd::Constant(1, r));
    return composite_score_rho(dataset, Theta{beta, s})[0];
  };

  static const double grid[] = {0.0,  0.02, 0.05, 0.1, 0.15, 0.2,  0.3,  0.4,
                                0.5,  0.6,  0.7,  0.8, 0.9,  0.95, 0.99, kRhoMax};
  int evals = 0;
  double lo = -1.0, hi = -1.0, score_lo = 0.0, score_hi = 0.0;
  double prev = 0.0, prev_score = 0.0;
  bool have_prev = false, any_positive = false;
  for (double r : grid) {
    const double s = score_at(r);
    ++evals;
    if (s == 0.0) return RhoSolve{Eigen::VectorXd::Constant(1, r), false, evals, 0.0};
    if (s > 0.0) any_positive = true;
    if (have_prev && prev_score > 0.0 && s < 0.0) {
      lo = prev;
      hi = r;
      score_lo = prev_score;
      score_hi = s;
      break;
    }
    prev = r;
    prev_score = s;
    have_prev = true;
  }

  if (lo < 0.0) {
    if (!any_positive) {
      // Score nonpositive everywhere: the composite likelihood is maximized
      // at the rho = 0 boundary.
      return RhoSolve{Eigen::VectorXd::Zero(1), true, evals, score_at(0.0)};
    }
    // Score positive through the top of the grid: boundary optimum near 1.
    return RhoSolve{Eigen::VectorXd::Constant(1, kRhoMax), true, evals, score_at(kRhoMax)};
  }

  double x = 0.5 * (lo + hi);
  for (int iter = 0; iter < config.max_iter; ++iter) {
    const double sx = score_at(x);
    ++evals;
    if (std::abs(sx) < config.rho_tol) {
      return RhoSolve{Eigen::VectorXd::Constant(1, x), false, evals, std::abs(sx)};
    }
    if (sx > 0.0) {
      lo = x;
      score_lo = sx;
    } else {
      hi = x;
      score_hi = sx;
    }
    // Newton in w = logit(rho), derivative by a central difference.
    const double w = logit(std::min(std::max(x, 1e-12), kRhoMax));
    const double hw = 1e-5;
    const double s_plus = score_at(inverse_logit(w + hw));
    const double s_minus = score_at(inverse_logit(w - hw));
    evals += 2;
    const double deriv = (s_plus - s_minus) / (2.0 * hw);
    double next = deriv != 0.0 ? inverse_logit(w - sx / deriv)
                               : std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(next) || next <= lo || next >= hi) {
      next = 0.5 * (lo + hi);  // bisection fallback
    }
    x = next;
  }
  throw convergence_error("solve_rho: no convergence in " + std::to_string(config.max_iter) +
                          " iterations");
}

// Nested families: Newton on (u, v) with rho2 = s t, rho3 = s (1 - t),
// s = sigmoid(u) (1 - 1e-6), t = sigmoid(v); the rescaling keeps
// rho2 + rho3 < 1 for every (u, v). Falls back to coordinate-wise bracketed
// solves when Newton stalls.
struct NestedTransform {
  static Eigen::Vector2d to_rho(double u, double v) {
    const double s = inverse_logit(u) * kRhoMax;
    const double t = inverse_logit(v);
    return {s * t, s * (1.0 - t)};
  }
  static std::pair<double, double> from_rho(const Eigen::Vector2d& rho) {
    const double s = std::min(std::max(rho.sum() / kRhoMax, 1e-8), 1.0 - 1e-8);
    const double t =
        rho.sum() > 0.0 ? std::min(std::max(rho[0] / rho.sum(), 1e-8), 1.0 - 1e-8) : 0.5;
    return {logit(s), logit(t)};
  }
};

RhoSolve solve_rho_nested(const Dataset& dataset, const Eigen::VectorXd& beta,
                          CorrelationKind kind, const SolverConfig& config) {
  int evals = 0;
  const auto theta_at = [&](const Eigen::Vector2d& rho) {
    return Theta{beta, CorrelationStructure(kind, rho)};
  };
  const auto score_at = [&](const Eigen::Vector2d& rho) -> Eigen::Vector2d {
    ++evals;
    return composite_score_rho(dataset, theta_at(rho));
  };

  // Coarse composite-likelihood grid for the starting point.
  Eigen::Vector2d best(0.15, 0.15);
  if (config.rho_init.size() == 2 && config.rho_init.sum() > 1e-6) {
    best = config.rho_init;
  } else {
    double best_value = -std::numeric_limits<double>::infinity();
    for (double s : {0.05, 0.15, 0.3, 0.5, 0.7, 0.9}) {
      for (double t : {0.125, 0.375, 0.625, 0.875}) {
        const Eigen::Vector2d rho(s * t, s * (1.0 - t));
        const double value = composite_loglik(dataset, theta_at(rho));
        if (value > best_value) {
          best_value = value;
          best = rho;
        }
      }
    }
  }

  auto [u, v] = NestedTransform::from_rho(best);
  Eigen::Vector2d rho = NestedTransform::to_rho(u, v);
  Eigen::Vector2d score = score_at(rho);

  for (int iter = 0; iter < config.max_iter; ++iter) {
    if (sup_norm(score) < config.rho_tol) {
      return RhoSolve{rho, false, iter, sup_norm(score)};
    }
    // Jacobian of the score with respect to (u, v) by central differences.
    Eigen::Matrix2d jac;
    const double h = 1e-4;
    {
      const Eigen::Vector2d sp = score_at(NestedTransform::to_rho(u + h, v));
      const Eigen::Vector2d sm = score_at(NestedTransform::to_rho(u - h, v));
      jac.col(0) = (sp - sm) / (2.0 * h);
    }
    {
      const Eigen::Vector2d sp = score_at(NestedTransform::to_rho(u, v + h));
      const Eigen::Vector2d sm = score_at(NestedTransform::to_rho(u, v - h));
      jac.col(1) = (sp - sm) / (2.0 * h);
    }

    bool stepped = false;
    if (std::abs(jac.determinant()) > 1e-14) {
      const Eigen::Vector2d delta = jac.partialPivLu().solve(-score);
      double scale = 1.0;
      for (int halving = 0; halving <= 8; ++halving) {
        const double u_new = u + scale * delta[0];
        const double v_new = v + scale * delta[1];
        const Eigen::Vector2d rho_new = NestedTransform::to_rho(u_new, v_new);
        const Eigen::Vector2d score_new = score_at(rho_new);
        if (sup_norm(score_new) < sup_norm(score)) {
          u = u_new;
          v = v_new;
          rho = rho_new;
          score = score_new;
          stepped = true;
          break;
        }
        scale *= 0.5;
      }
    }
    if (!stepped) break;  // Newton stalled; hand over to the bracketed fallback
  }

  // Coordinate-wise bracketed fallback. Each sweep solves one component's
  // score on its admissible segment with the other held fixed.
  const auto component_solve = [&](int comp) {
    const double other = rho[1 - comp];
    const double top = std::max(0.0, kRhoMax - other);
    const auto f = [&](double r) {
      Eigen::Vector2d candidate = rho;
      candidate[comp] = r;
      return score_at(candidate)[comp];
    };
    double lo = 0.0, hi = top;
    double flo = f(lo);
    if (flo <= 0.0) {
      rho[comp] = 0.0;
      return flo == 0.0;
    }
    double fhi = f(hi);
    if (fhi >= 0.0) {
      rho[comp] = top;
      return false;
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double fmid = f(mid);
      if (std::abs(fmid) < config.rho_tol || hi - lo < 1e-14) {
        rho[comp] = mid;
        return true;
      }
      (fmid > 0.0 ? lo : hi) = mid;
    }
    rho[comp] = 0.5 * (lo + hi);
    return true;
  };

  for (int sweep = 0; sweep < config.max_outer; ++sweep) {
    component_solve(0);
    component_solve(1);
    score = score_at(rho);
    // KKT check: a component pinned at zero only needs a nonpositive score.
    Eigen::Vector2d active = score;
    for (int c = 0; c < 2; ++c) {
      if (rho[c] == 0.0 && score[c] < 0.0) active[c] = 0.0;
    }
    if (sup_norm(active) < config.rho_tol) {
      const bool at_edge = rho[0] == 0.0 || rho[1] == 0.0 || rho.sum() >= kRhoMax;
      return RhoSolve{rho, at_edge, evals, sup_norm(active)};
    }
  }
  throw convergence_error("solve_rho: nested solver failed to converge");
}

}  // namespace

RhoSolve solve_rho(const Dataset& dataset, const Eigen::VectorXd& beta_fixed,
                   CorrelationKind kind, const SolverConfig& config) {
  if (count_pairs(dataset) == 0) {
    throw argument_error("solve_rho: dataset has no within-cluster pairs");
  }
  const int q = correlation_dim(kind);
  if (q == 0) return RhoSolve{Eigen::VectorXd(0), false, 0, 0.0};
  if (q == 1) return solve_rho_scalar(dataset, beta_fixed, kind, config);
  return solve_rho_nested(dataset, beta_fixed, kind, config);
}

// ---------------------------------------------------------------------------
// Full fit
// ---------------------------------------------------------------------------

namespace {

// Model-based and sandwich covariances of beta-hat (per-fit scale).
void attach_beta_covariances(const Dataset& dataset, FitResult& result) {
  const int m = dataset.n_clusters();
  const GeeScore g = gee_score(dataset, result.theta_hat);
  const Eigen::MatrixXd bread_inv =
      g.sensitivity.ldlt().solve(Eigen::MatrixXd::Identity(g.sensitivity.rows(),
                                                           g.sensitivity.cols()));
  const ClusterScores scores = per_cluster_scores(dataset, result.theta_hat);
  const Eigen::MatrixXd meat =
      scores.beta_scores.transpose() * scores.beta_scores / static_cast<double>(m);
  result.beta_cov_model = bread_inv / static_cast<double>(m);
  result.beta_cov_robust = bread_inv * meat * bread_inv.transpose() / static_cast<double>(m);
  result.beta_cov_model =
      0.5 * (result.beta_cov_model + result.beta_cov_model.transpose()).eval();
  result.beta_cov_robust =
      0.5 * (result.beta_cov_robust + result.beta_cov_robust.transpose()).eval();
}

}  // namespace

FitResult fit(const Dataset& dataset, CorrelationKind kind, const SolverConfig& config) {
  dataset.validate();
  if (is_nested(kind) && !dataset.three_level) {
    throw structure_error("nested correlation structures require three-level data");
  }
  const int q = correlation_dim(kind);
  Eigen::VectorXd rho0 = config.rho_init;
  if (rho0.size() == 0) rho0 = Eigen::VectorXd::Zero(q);
  if (rho0.size() != q) {
    throw argument_error("rho_init has the wrong dimension for the structure");
  }

  FitResult result;
  const auto structure_at = [&](const Eigen::VectorXd& r) {
    return CorrelationStructure(kind, r);
  };
  const auto record = [&](const Eigen::VectorXd& beta, const Eigen::VectorXd& rho) {
    result.step_trace.push_back(StepEstimate{beta, rho});
  };

  if (q == 0) {
    const BetaSolve b = solve_beta(dataset, CorrelationStructure::independence(), {}, config);
    result.iterations.beta_total = b.iterations;
    result.theta_hat = Theta{b.beta, CorrelationStructure::independence()};
    record(b.beta, {});
    result.converged = true;
  } else if (config.mode == FitMode::FourStep) {
    const BetaSolve b1 = solve_beta(dataset, structure_at(rho0), {}, config);
    record(b1.beta, rho0);
    const RhoSolve r2 = solve_rho(dataset, b1.beta, kind, config);
    record(b1.beta, r2.rho);
    SolverConfig warm = config;
    warm.rho_init = r2.rho;
    const BetaSolve b2 = solve_beta(dataset, structure_at(r2.rho), b1.beta, config);
    record(b2.beta, r2.rho);
    const RhoSolve r3 = solve_rho(dataset, b2.beta, kind, warm);
    record(b2.beta, r3.rho);
    result.theta_hat = Theta{b2.beta, structure_at(r3.rho)};
    result.iterations.beta_total = b1.iterations + b2.iterations;
    result.iterations.rho_total = r2.iterations + r3.iterations;
    result.rho_boundary = r3.boundary;
    result.converged = true;
  } else {
    BetaSolve b = solve_beta(dataset, structure_at(rho0), {}, config);
    RhoSolve r = solve_rho(dataset, b.beta, kind, config);
    result.iterations.beta_total = b.iterations;
    result.iterations.rho_total = r.iterations;
    record(b.beta, r.rho);
    for (int outer = 0; outer < config.max_outer; ++outer) {
      SolverConfig warm = config;
      warm.rho_init = r.rho;
      const BetaSolve b_new = solve_beta(dataset, structure_at(r.rho), b.beta, config);
      const RhoSolve r_new = solve_rho(dataset, b_new.beta, kind, warm);
      const double delta = std::max(sup_norm(b_new.beta - b.beta), sup_norm(r_new.rho - r.rho));
      b = b_new;
      r = r_new;
      result.iterations.beta_total += b_new.iterations;
      result.iterations.rho_total += r_new.iterations;
      result.iterations.outer = outer + 1;
      record(b.beta, r.rho);
      if (delta < config.outer_tol) {
        result.converged = true;
        break;
      }
    }
    result.theta_hat = Theta{b.beta, structure_at(r.rho)};
    result.rho_boundary = r.boundary;
  }

  attach_beta_covariances(dataset, result);
  result.composite_loglik = composite_loglik(dataset, result.theta_hat);
  return result;
}

}  // namespace margex
