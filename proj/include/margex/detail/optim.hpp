#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>

namespace margex::detail {

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int n_grad_evals = 0;
  bool converged = false;
};

// Central-difference gradient with a coordinate-wise adaptive step.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& x) {
  const double h0 = std::cbrt(std::numeric_limits<double>::epsilon());
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x, xm = x;
  for (Eigen::Index l = 0; l < x.size(); ++l) {
    const double h = h0 * std::max(1.0, std::abs(x[l]));
    xp[l] = x[l] + h;
    xm[l] = x[l] - h;
    g[l] = (f(xp) - f(xm)) / (2.0 * h);
    xp[l] = x[l];
    xm[l] = x[l];
  }
  return g;
}

// BFGS maximization with numeric gradients and a backtracking line search.
// `f` may return -inf to reject a point. Near the optimum the objective can
// be flat to within one ulp while gradients are still informative, so small
// backtracked steps that merely tie are accepted and convergence near the
// representational floor counts as success.
inline OptimResult bfgs_maximize(const std::function<double(const Eigen::VectorXd&)>& f,
                                 Eigen::VectorXd x0, double grad_tol = 1e-6,
                                 int max_grad_evals = 500) {
  constexpr double eps = std::numeric_limits<double>::epsilon();
  const Eigen::Index n = x0.size();
  OptimResult out;
  out.x = std::move(x0);
  out.value = f(out.x);
  if (!std::isfinite(out.value)) {
    return out;  // infeasible start; caller checks `converged`
  }

  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd grad = numeric_gradient(f, out.x);
  ++out.n_grad_evals;

  while (out.n_grad_evals < max_grad_evals) {
    if (grad.cwiseAbs().maxCoeff() < grad_tol) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd direction = h_inv * grad;  // ascent direction
    if (direction.dot(grad) <= 0.0) {
      h_inv = Eigen::MatrixXd::Identity(n, n);
      direction = grad;
    }

    const double slope = direction.dot(grad);
    const double flat_slack = 8.0 * eps * (1.0 + std::abs(out.value));
    double step = 1.0;
    double new_value = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new;
    bool accepted = false;
    for (int backtrack = 0; backtrack < 40; ++backtrack) {
      x_new = out.x + step * direction;
      new_value = f(x_new);
      if (std::isfinite(new_value)) {
        if (new_value >= out.value + 1e-4 * step * slope) {
          accepted = true;
          break;
        }
        // Plateau: a well-backtracked step that does not measurably lose is
        // still useful, because the next gradient refines the curvature model.
        if (backtrack >= 4 && new_value >= out.value - flat_slack) {
          accepted = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No step the objective can resolve; the gradient decides whether this
      // is the optimum at the precision the function value supports.
      const double stall_tol =
          std::max(grad_tol, 2.0 * std::sqrt(eps) * (1.0 + std::abs(out.value)));
      out.converged = grad.cwiseAbs().maxCoeff() < stall_tol;
      break;
    }

    Eigen::VectorXd grad_new = numeric_gradient(f, x_new);
    ++out.n_grad_evals;
    const Eigen::VectorXd s = x_new - out.x;
    const Eigen::VectorXd y = grad - grad_new;  // minimization convention on -f
    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm() && sy > 0.0) {
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
      const Eigen::MatrixXd v = eye - s * y.transpose() / sy;
      h_inv = v * h_inv * v.transpose() + s * s.transpose() / sy;
    }
    out.x = std::move(x_new);
    out.value = new_value;
    grad = std::move(grad_new);
  }
  out.gradient = grad;
  return out;
}

}  // namespace margex::detail
