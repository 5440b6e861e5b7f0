#include "margex/mle_oracle.hpp"

#include <Eigen/LU>
#include <cmath>
#include <limits>
#include <vector>

#include "margex/detail/optim.hpp"
#include "margex/estimation.hpp"
#include "margex/model_core.hpp"

namespace margex {

double full_loglik(const Dataset& dataset, const Theta& theta, int size_cap) {
  double total = 0.0;
  for (const auto& cluster : dataset.clusters) {
    const double prob = pattern_prob(cluster, theta, size_cap);
    if (!(prob > 0.0)) {
      throw numeric_error("full_loglik: nonpositive pattern probability in cluster " +
                          std::to_string(cluster.label));
    }
    total += std::log(prob);
  }
  return total;
}

namespace {

constexpr double kRhoMax = 1.0 - 1e-6;

double logit(double p) { return std::log(p) - std::log1p(-p); }

double clamp(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// Mapping between the optimizer's unconstrained vector (beta, w) and Theta.
// Scalar rho: w = logit(rho). Nested: w1 = logit((rho2+rho3)/kRhoMax),
// w2 = logit(rho2/(rho2+rho3)).
struct ParamMap {
  CorrelationKind kind;
  int p;
  int q;

  Eigen::VectorXd pack(const Theta& theta) const {
    Eigen::VectorXd x(p + q);
    x.head(p) = theta.beta;
    const auto& rho = theta.rho.params();
    if (q == 1) {
      x[p] = logit(clamp(rho[0], 1e-4, 1.0 - 1e-4));
    } else if (q == 2) {
      const double s = clamp(rho.sum() / kRhoMax, 1e-4, 1.0 - 1e-4);
      const double t = rho.sum() > 0.0 ? clamp(rho[0] / rho.sum(), 1e-4, 1.0 - 1e-4) : 0.5;
      x[p] = logit(s);
      x[p + 1] = logit(t);
    }
    return x;
  }

  Theta unpack(const Eigen::VectorXd& x) const {
    Theta theta;
    theta.beta = x.head(p);
    if (q == 0) {
      theta.rho = CorrelationStructure::independence();
    } else if (q == 1) {
      theta.rho =
          CorrelationStructure(kind, Eigen::VectorXd::Constant(1, inverse_logit(x[p])));
    } else {
      const double s = inverse_logit(x[p]) * kRhoMax;
      const double t = inverse_logit(x[p + 1]);
      Eigen::VectorXd rho(2);
      rho << s * t, s * (1.0 - t);
      theta.rho = CorrelationStructure(kind, rho);
    }
    return theta;
  }
};

// Observed-information covariance: inverse of minus the finite-difference
// Hessian of the log-likelihood on the natural (beta, rho) scale. When
// rho-hat is pinned at the edge of its domain no central difference in rho is
// possible; the beta block is then computed with rho held fixed and the rho
// entries are reported as NaN (the caller flags the boundary).
Eigen::MatrixXd observed_information_cov(const Dataset& dataset, const Theta& theta,
                                         const MLEOptions& options, int& evals,
                                         bool& rho_pinned) {
  const int p = static_cast<int>(theta.beta.size());
  const int q = theta.rho.dim();

  Eigen::VectorXd center(p + q);
  center.head(p) = theta.beta;
  if (q > 0) center.tail(q) = theta.rho.params();

  // Steps: eps^(1/4)-scaled, shrunk so rho +/- h stays inside the domain.
  Eigen::VectorXd h(p + q);
  const double h0 = std::pow(std::numeric_limits<double>::epsilon(), 0.25);
  for (int l = 0; l < p + q; ++l) h[l] = h0 * std::max(1.0, std::abs(center[l]));
  rho_pinned = false;
  if (q > 0) {
    const Eigen::VectorXd rho = theta.rho.params();
    const double headroom = 1.0 - rho.sum();
    for (int l = 0; l < q; ++l) {
      h[p + l] = std::min({h[p + l], 0.45 * rho[l], 0.45 * headroom});
      if (h[p + l] < 1e-9) rho_pinned = true;
    }
  }
  const int dim = rho_pinned ? p : p + q;

  const auto eval_at = [&](const Eigen::VectorXd& natural) {
    Theta t;
    t.beta = natural.head(p);
    t.rho = (q > 0 && !rho_pinned) ? theta.rho.with_params(natural.tail(q)) : theta.rho;
    ++evals;
    return full_loglik(dataset, t, options.size_cap);
  };

  const Eigen::VectorXd x0 = center.head(dim);
  const double f0 = eval_at(x0);
  Eigen::MatrixXd hess(dim, dim);
  for (int a = 0; a < dim; ++a) {
    Eigen::VectorXd xp = x0, xm = x0;
    xp[a] += h[a];
    xm[a] -= h[a];
    hess(a, a) = (eval_at(xp) - 2.0 * f0 + eval_at(xm)) / (h[a] * h[a]);
    for (int b = a + 1; b < dim; ++b) {
      Eigen::VectorXd xpp = x0, xpm = x0, xmp = x0, xmm = x0;
      xpp[a] += h[a]; xpp[b] += h[b];
      xpm[a] += h[a]; xpm[b] -= h[b];
      xmp[a] -= h[a]; xmp[b] += h[b];
      xmm[a] -= h[a]; xmm[b] -= h[b];
      const double mixed =
          (eval_at(xpp) - eval_at(xpm) - eval_at(xmp) + eval_at(xmm)) / (4.0 * h[a] * h[b]);
      hess(a, b) = mixed;
      hess(b, a) = mixed;
    }
  }

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(-hess);
  if (std::abs(lu.determinant()) < 1e-300) {
    throw numeric_error("fit_mle: singular observed information");
  }
  const Eigen::MatrixXd block = lu.inverse();
  Eigen::MatrixXd cov =
      Eigen::MatrixXd::Constant(p + q, p + q, std::numeric_limits<double>::quiet_NaN());
  cov.topLeftCorner(dim, dim) = 0.5 * (block + block.transpose());
  return cov;
}

}  // namespace

MLEResult fit_mle(const Dataset& dataset, CorrelationKind kind, std::optional<Theta> init,
                  const MLEOptions& options) {
  dataset.validate();
  if (is_nested(kind) && !dataset.three_level) {
    throw structure_error("nested correlation structures require three-level data");
  }
  for (const auto& cluster : dataset.clusters) {
    if (cluster.size() > options.size_cap) {
      throw resource_error("fit_mle: cluster " + std::to_string(cluster.label) +
                           " exceeds the size cap of " + std::to_string(options.size_cap));
    }
  }

  const ParamMap map{kind, dataset.n_covariates(), correlation_dim(kind)};
  Theta start;
  if (init) {
    start = *init;
    if (start.rho.kind() != kind) {
      throw argument_error("fit_mle: init structure kind mismatch");
    }
  } else {
    start = fit(dataset, kind).theta_hat;
  }

  MLEResult result;
  int evals = 0;
  // The optimizer sees the per-cluster mean log-likelihood: with the raw sum,
  // improvements near the optimum drop below one ulp of the objective and the
  // line search cannot resolve them.
  const double m = static_cast<double>(dataset.n_clusters());
  const auto objective = [&](const Eigen::VectorXd& x) {
    ++evals;
    try {
      return full_loglik(dataset, map.unpack(x), options.size_cap) / m;
    } catch (const numeric_error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  // Tolerance on the normalized gradient chosen so the raw-scale gradient at
  // the optimum stays below 1e-5.
  const double grad_tol = std::min(options.grad_tol, 5e-6 / m);

  // Transformed rho coordinates past this point are treated as boundary
  // drift; they get frozen at the edge of the fitting range (rho within 1e-6
  // of 0 or 1) and the remaining coordinates are re-solved.
  const double w_drift = 9.2;                   // logit(1 - 1e-4)
  const double w_cap = std::log(1e6 - 1.0);     // logit(1 - 1e-6)

  const int phase1_budget = std::min(options.max_grad_evals, 150);
  detail::OptimResult opt =
      detail::bfgs_maximize(objective, map.pack(start), grad_tol, phase1_budget);
  if (!opt.converged) {
    std::vector<int> free_idx;
    Eigen::VectorXd pinned = opt.x;
    bool any_frozen = false;
    for (int l = 0; l < static_cast<int>(opt.x.size()); ++l) {
      if (l >= map.p && std::abs(opt.x[l]) > w_drift) {
        pinned[l] = opt.x[l] > 0.0 ? w_cap : -w_cap;
        any_frozen = true;
      } else {
        free_idx.push_back(l);
      }
    }
    const int budget = options.max_grad_evals - opt.n_grad_evals;
    if (any_frozen && !free_idx.empty()) {
      const auto sub_objective = [&](const Eigen::VectorXd& xs) {
        Eigen::VectorXd full = pinned;
        for (std::size_t i = 0; i < free_idx.size(); ++i) full[free_idx[i]] = xs[i];
        return objective(full);
      };
      Eigen::VectorXd xs0(free_idx.size());
      for (std::size_t i = 0; i < free_idx.size(); ++i) xs0[i] = opt.x[free_idx[i]];
      const detail::OptimResult sub = detail::bfgs_maximize(
          sub_objective, xs0, grad_tol, std::max(budget, 50));
      opt.converged = sub.converged;
      opt.value = sub.value;
      opt.x = pinned;
      for (std::size_t i = 0; i < free_idx.size(); ++i) opt.x[free_idx[i]] = sub.x[i];
      result.rho_boundary = true;
    } else if (budget > 0) {
      opt = detail::bfgs_maximize(objective, opt.x, grad_tol, budget);
    }
  }
  if (!opt.converged) {
    throw convergence_error("fit_mle: quasi-Newton failed to reach gradient tolerance " +
                            std::to_string(options.grad_tol) + " within " +
                            std::to_string(options.max_grad_evals) + " gradient evaluations");
  }

  result.theta_hat = map.unpack(opt.x);
  result.loglik = opt.value * m;
  result.converged = true;
  if (map.q >= 1) {
    const Eigen::VectorXd rho = result.theta_hat.rho.params();
    for (int l = 0; l < map.q; ++l) {
      if (rho[l] < 1e-4 || rho[l] > 1.0 - 1e-4) result.rho_boundary = true;
    }
    if (map.q == 2 && rho.sum() > 1.0 - 1e-4) result.rho_boundary = true;
  }
  bool rho_pinned = false;
  result.hessian_cov =
      observed_information_cov(dataset, result.theta_hat, options, evals, rho_pinned);
  if (rho_pinned) result.rho_boundary = true;
  result.n_loglik_evals = evals;
  return result;
}

}  // namespace margex
