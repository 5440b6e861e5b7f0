#include "margex/variance.hpp"

#include <Eigen/LU>
#include <cmath>

#include "margex/estimation.hpp"

namespace margex {

// AS 241 algorithm PPND16 (Wichura, 1988).
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw domain_error("normal_quantile: p must lie in (0, 1)");
  }
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    value = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
                3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
              4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
              2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    value = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
              5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
              5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -value : value;
}

Interval wald_ci(double estimate, double se, double level) {
  if (se < 0.0) throw argument_error("wald_ci: se must be >= 0");
  if (!(level > 0.0 && level < 1.0)) {
    throw argument_error("wald_ci: level must lie in (0, 1)");
  }
  const double z = normal_quantile(0.5 * (1.0 + level));
  return Interval{estimate - z * se, estimate + z * se};
}

namespace {

Eigen::MatrixXd symmetrize(Eigen::MatrixXd m) { return 0.5 * (m + m.transpose().eval()); }

Eigen::MatrixXd bread_inverse(const Dataset& dataset, const Theta& theta) {
  const GeeScore g = gee_score(dataset, theta);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(g.sensitivity);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
    throw numeric_error("singular model-based information matrix");
  }
  return ldlt.solve(
      Eigen::MatrixXd::Identity(g.sensitivity.rows(), g.sensitivity.cols()));
}

}  // namespace

Eigen::MatrixXd model_based_cov(const Dataset& dataset, const Theta& theta_hat) {
  // m (sum D'V^-1 D)^-1 = (m-averaged sensitivity)^-1.
  return symmetrize(bread_inverse(dataset, theta_hat));
}

Eigen::MatrixXd robust_cov(const Dataset& dataset, const Theta& theta_hat) {
  const int m = dataset.n_clusters();
  const Eigen::MatrixXd bi = bread_inverse(dataset, theta_hat);
  const ClusterScores scores = per_cluster_scores(dataset, theta_hat);
  const Eigen::MatrixXd meat =
      scores.beta_scores.transpose() * scores.beta_scores / static_cast<double>(m);
  return symmetrize(bi * meat * bi.transpose());
}

Eigen::MatrixXd joint_sandwich(const Dataset& dataset, const Theta& theta_hat,
                               bool rho_boundary) {
  const int m = dataset.n_clusters();
  const int p = static_cast<int>(theta_hat.beta.size());
  const int q = theta_hat.rho.dim();
  if (q == 0) {
    return symmetrize(robust_cov(dataset, theta_hat) / static_cast<double>(m));
  }
  if (rho_boundary) {
    throw boundary_error("joint_sandwich: rho-hat on the boundary; asymptotics invalid");
  }
  for (int l = 0; l < q; ++l) {
    if (theta_hat.rho.params()[l] <= 0.0) {
      throw boundary_error("joint_sandwich: rho-hat on the boundary; asymptotics invalid");
    }
  }

  const GeeScore g = gee_score(dataset, theta_hat);
  Eigen::MatrixXd bread = Eigen::MatrixXd::Zero(p + q, p + q);
  bread.topLeftCorner(p, p) = g.sensitivity;

  // Lower blocks: minus the derivative of the composite rho score, by central
  // finite differences with relative step 1e-5.
  const Eigen::VectorXd rho = theta_hat.rho.params();
  for (int l = 0; l < p; ++l) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta_hat.beta[l]));
    Eigen::VectorXd bp = theta_hat.beta, bm = theta_hat.beta;
    bp[l] += h;
    bm[l] -= h;
    const Eigen::VectorXd sp = composite_score_rho(dataset, Theta{bp, theta_hat.rho});
    const Eigen::VectorXd sm = composite_score_rho(dataset, Theta{bm, theta_hat.rho});
    bread.block(p, l, q, 1) = -(sp - sm) / (2.0 * h);
  }
  for (int l = 0; l < q; ++l) {
    double h = 1e-5 * std::max(1.0, std::abs(rho[l]));
    // Keep both evaluation points inside the admissible region.
    h = std::min(h, 0.5 * rho[l]);
    if (q == 1) {
      h = std::min(h, 0.5 * (1.0 - rho[l]));
    } else {
      h = std::min(h, 0.5 * std::max(1e-12, 1.0 - rho.sum()));
    }
    if (!(h > 0.0)) {
      throw boundary_error("joint_sandwich: no admissible finite-difference step for rho");
    }
    Eigen::VectorXd rp = rho, rm = rho;
    rp[l] += h;
    rm[l] -= h;
    const Eigen::VectorXd sp =
        composite_score_rho(dataset, Theta{theta_hat.beta, theta_hat.rho.with_params(rp)});
    const Eigen::VectorXd sm =
        composite_score_rho(dataset, Theta{theta_hat.beta, theta_hat.rho.with_params(rm)});
    bread.block(p, p + l, q, 1) = -(sp - sm) / (2.0 * h);
  }

  const ClusterScores scores = per_cluster_scores(dataset, theta_hat);
  Eigen::MatrixXd stacked(m, p + q);
  stacked << scores.beta_scores, scores.rho_scores;
  const Eigen::MatrixXd meat = stacked.transpose() * stacked / static_cast<double>(m);

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(bread);
  if (std::abs(lu.determinant()) < 1e-300) {
    throw numeric_error("joint_sandwich: singular bread matrix");
  }
  const Eigen::MatrixXd bread_inv = lu.inverse();
  return symmetrize(bread_inv * meat * bread_inv.transpose() / static_cast<double>(m));
}

CovarianceReport covariance_report(const Dataset& dataset, const Theta& theta_hat,
                                   double ci_level, bool rho_boundary) {
  const int m = dataset.n_clusters();
  const int p = static_cast<int>(theta_hat.beta.size());
  CovarianceReport report;
  report.ci_level = ci_level;
  report.beta_cov_model = model_based_cov(dataset, theta_hat) / static_cast<double>(m);
  report.beta_cov_robust = robust_cov(dataset, theta_hat) / static_cast<double>(m);
  report.se_model = report.beta_cov_model.diagonal().cwiseMax(0.0).cwiseSqrt();
  report.se_robust = report.beta_cov_robust.diagonal().cwiseMax(0.0).cwiseSqrt();
  if (m < p + 1) {
    report.warnings.push_back("fewer clusters than p + 1; sandwich covariance is unreliable");
  }
  if (theta_hat.rho.dim() > 0) {
    try {
      const Eigen::MatrixXd joint = joint_sandwich(dataset, theta_hat, rho_boundary);
      report.joint_cov = joint;
      report.rho_se = joint.diagonal()
                          .tail(theta_hat.rho.dim())
                          .cwiseMax(0.0)
                          .cwiseSqrt();
    } catch (const boundary_error&) {
      report.warnings.push_back("rho-hat on the boundary; no joint sandwich covariance");
    }
  }
  return report;
}

}  // namespace margex
