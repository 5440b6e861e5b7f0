#include "margex/model_core.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace margex {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum exp(t)) over a short list, skipping -inf entries.
double logsumexp(std::initializer_list<double> terms) {
  double m = kNegInf;
  for (double t : terms) m = std::max(m, t);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double t : terms) {
    if (t != kNegInf) s += std::exp(t - m);
  }
  return m + std::log(s);
}

}  // namespace

double log1pexp(double x) {
  if (x > 33.3) return x;
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  if (x > -37.0) return std::log1p(std::exp(x));
  return std::exp(x);
}

double inverse_logit(double eta) {
  if (!std::isfinite(eta)) throw domain_error("inverse_logit: eta must be finite");
  if (eta >= 0.0) {
    const double p = 1.0 / (1.0 + std::exp(-eta));
    return p < 1.0 ? p : std::nextafter(1.0, 0.0);
  }
  const double e = std::exp(eta);
  const double p = e / (1.0 + e);
  return p > 0.0 ? p : std::numeric_limits<double>::min();
}

double marginal_prob(const Eigen::VectorXd& x, const Eigen::VectorXd& beta) {
  if (x.size() != beta.size()) {
    throw argument_error("marginal_prob: covariate/beta dimension mismatch");
  }
  return inverse_logit(x.dot(beta));
}

double PairDistribution::log_cell(int y_j, int y_k) const {
  if (y_j == 1) return y_k == 1 ? log_p11 : log_p10;
  return y_k == 1 ? log_p01 : log_p00;
}

PairDistribution pair_distribution(double eta_j, double eta_k, double rho_jk) {
  if (!(rho_jk >= 0.0 && rho_jk <= 1.0)) {
    throw domain_error("pair correlation must lie in [0, 1], got " + std::to_string(rho_jk));
  }
  const double a = -eta_j;
  const double b = -eta_k;
  // Symmetric reductions use (lo, hi) so that swapping j and k cannot change
  // the floating-point result.
  const double lo = std::min(a, b);
  const double hi = std::max(a, b);
  const double log_1mr = rho_jk < 1.0 ? std::log1p(-rho_jk) : kNegInf;
  const double log_r = rho_jk > 0.0 ? std::log(rho_jk) : kNegInf;

  const double log_den = logsumexp({log_1mr + lo + hi, lo, hi, 0.0});
  const double la = log1pexp(a);
  const double lb = log1pexp(b);

  PairDistribution d;
  d.log_p11 = -log_den;
  d.log_p10 = b + logsumexp({log_1mr + a, 0.0}) - la - log_den;
  d.log_p01 = a + logsumexp({log_1mr + b, 0.0}) - lb - log_den;
  d.log_p00 = lo + hi + logsumexp({log_1mr + lo + hi, lo, hi, 0.0, log_r}) - la - lb - log_den;
  d.log_dp11_drho = lo + hi - 2.0 * log_den;
  return d;
}

double pairwise_prob(const Eigen::VectorXd& x_j, const Eigen::VectorXd& x_k,
                     const Eigen::VectorXd& beta, double rho_jk) {
  if (x_j.size() != beta.size() || x_k.size() != beta.size()) {
    throw argument_error("pairwise_prob: covariate/beta dimension mismatch");
  }
  const auto d = pair_distribution(x_j.dot(beta), x_k.dot(beta), rho_jk);
  return std::exp(d.log_p11);
}

Eigen::MatrixXd covariance_matrix(const ClusterData& cluster, const Theta& theta) {
  const int n = cluster.size();
  Eigen::VectorXd eta(n);
  for (int j = 0; j < n; ++j) {
    if (cluster.observations[j].covariates.size() != theta.beta.size()) {
      throw argument_error("covariance_matrix: covariate/beta dimension mismatch");
    }
    eta[j] = cluster.observations[j].covariates.dot(theta.beta);
  }

  Eigen::MatrixXd v(n, n);
  for (int j = 0; j < n; ++j) {
    const double p = inverse_logit(eta[j]);
    v(j, j) = p * (1.0 - p);
  }
  for (int j = 0; j < n; ++j) {
    for (int k = j + 1; k < n; ++k) {
      const double rho = rho_pair(theta.rho, cluster.observations[j], cluster.observations[k]);
      double vjk = 0.0;
      if (rho > 0.0) {
        const double lo = std::min(-eta[j], -eta[k]);
        const double hi = std::max(-eta[j], -eta[k]);
        const double log_1mr = rho < 1.0 ? std::log1p(-rho) : kNegInf;
        const double log_den = logsumexp({log_1mr + lo + hi, lo, hi, 0.0});
        const double log_den0 = logsumexp({lo + hi, lo, hi, 0.0});
        // p_jk - p_j p_k = rho e^{a+b} / (den * den0), always nonnegative.
        vjk = std::exp(std::log(rho) + lo + hi - log_den - log_den0);
      }
      v(j, k) = vjk;
      v(k, j) = vjk;
    }
  }
  return v;
}

Eigen::MatrixXd scale_matrix(const CorrelationStructure& structure,
                             const ClusterData& cluster) {
  const int n = cluster.size();
  Eigen::MatrixXd c = Eigen::MatrixXd::Identity(n, n);
  for (int j = 0; j < n; ++j) {
    for (int k = j + 1; k < n; ++k) {
      const double r = rho_pair(structure, cluster.observations[j], cluster.observations[k]);
      const double s = std::sqrt(r);
      c(j, k) = s;
      c(k, j) = s;
    }
  }
  return c;
}

void validate_scale_matrix(const Eigen::MatrixXd& c, const std::string& context) {
  const std::string where = context.empty() ? std::string() : " (" + context + ")";
  if (c.rows() != c.cols()) {
    throw structure_error("scale matrix must be square" + where);
  }
  if (!c.isApprox(c.transpose(), 1e-12)) {
    throw structure_error("scale matrix must be symmetric" + where);
  }
  for (Eigen::Index j = 0; j < c.rows(); ++j) {
    if (std::abs(c(j, j) - 1.0) > 1e-12) {
      throw structure_error("scale matrix must have a unit diagonal" + where);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-10) {
    throw structure_error("scale matrix is not positive semidefinite" + where +
                          ", min eigenvalue " + std::to_string(es.eigenvalues().minCoeff()));
  }
}

namespace {

// det(I + C_S diag(d_S)) via pivoted LU over the index subset S.
double subset_determinant(const Eigen::MatrixXd& c, const Eigen::VectorXd& d,
                          const std::vector<int>& subset) {
  const int s = static_cast<int>(subset.size());
  if (s == 0) return 1.0;
  Eigen::MatrixXd m(s, s);
  for (int r = 0; r < s; ++r) {
    for (int col = 0; col < s; ++col) {
      m(r, col) = c(subset[r], subset[col]) * d[subset[col]];
    }
    m(r, r) += 1.0;
  }
  return Eigen::PartialPivLU<Eigen::MatrixXd>(m).determinant();
}

}  // namespace

namespace detail {

// Inclusion-exclusion over the zero set; `a` holds -x_j' beta per observation.
// One subset per bitmask of Z; sign alternates with popcount.
double pattern_prob_impl(const Eigen::VectorXd& a, const std::vector<int>& outcomes,
                         const Eigen::MatrixXd& c) {
  const int n = static_cast<int>(outcomes.size());
  std::vector<int> ones, zeros;
  for (int j = 0; j < n; ++j) {
    (outcomes[j] == 1 ? ones : zeros).push_back(j);
  }
  Eigen::VectorXd d = a.array().exp();

  const int nz = static_cast<int>(zeros.size());
  long double total = 0.0L;
  std::vector<int> subset;
  subset.reserve(n);
  for (unsigned mask = 0; mask < (1u << nz); ++mask) {
    subset.assign(ones.begin(), ones.end());
    int parity = 0;
    for (int t = 0; t < nz; ++t) {
      if (mask & (1u << t)) {
        subset.push_back(zeros[t]);
        ++parity;
      }
    }
    const double det = subset_determinant(c, d, subset);
    if (!(det > 0.0) || !std::isfinite(det)) {
      throw numeric_error("joint probability determinant is not positive");
    }
    const long double term = 1.0L / static_cast<long double>(det);
    total += (parity % 2 == 0) ? term : -term;
  }
  return static_cast<double>(total);
}

}  // namespace detail

double joint_prob_all_ones(const Eigen::MatrixXd& x_rows, const Eigen::VectorXd& beta,
                           const Eigen::MatrixXd& c_s) {
  const int n = static_cast<int>(x_rows.rows());
  if (x_rows.cols() != beta.size()) {
    throw argument_error("joint_prob_all_ones: covariate/beta dimension mismatch");
  }
  if (c_s.rows() != n || c_s.cols() != n) {
    throw argument_error("joint_prob_all_ones: scale matrix size mismatch");
  }
  try {
    validate_scale_matrix(c_s);
  } catch (const structure_error& e) {
    throw domain_error(e.what());
  }
  const Eigen::VectorXd a = -(x_rows * beta);
  std::vector<int> all_ones(n, 1);
  return detail::pattern_prob_impl(a, all_ones, c_s);
}

double pattern_prob(const ClusterData& cluster, const Theta& theta, int size_cap) {
  const int n = cluster.size();
  if (n > size_cap) {
    throw resource_error("cluster " + std::to_string(cluster.label) + " has " +
                         std::to_string(n) + " observations, above the size cap of " +
                         std::to_string(size_cap));
  }
  Eigen::VectorXd a(n);
  std::vector<int> outcomes(n);
  for (int j = 0; j < n; ++j) {
    a[j] = -cluster.observations[j].covariates.dot(theta.beta);
    outcomes[j] = cluster.observations[j].outcome;
  }
  const Eigen::MatrixXd c = scale_matrix(theta.rho, cluster);
  // Admissible exchangeable/AR(1)/nested-exchangeable parameters always yield
  // a PSD scale matrix; the nested AR(1) family does not, so check it here.
  if (theta.rho.kind() == CorrelationKind::NestedExchAR1) {
    validate_scale_matrix(c, "cluster " + std::to_string(cluster.label));
  }
  return detail::pattern_prob_impl(a, outcomes, c);
}

}  // namespace margex
