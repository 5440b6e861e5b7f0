#include "margex/frailty_sim.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>

#include "margex/model_core.hpp"

namespace margex {

void SizeLaw::validate() const {
  if (values.empty() || values.size() != probs.size()) {
    throw argument_error("size law needs matching value/probability lists");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k] < 1) throw argument_error("size law values must be >= 1");
    if (probs[k] < 0.0) throw argument_error("size law probabilities must be >= 0");
    total += probs[k];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw argument_error("size law probabilities must sum to 1");
  }
}

std::vector<double> SizeLaw::cumulative() const {
  std::vector<double> cum(probs.size());
  std::partial_sum(probs.begin(), probs.end(), cum.begin());
  return cum;
}

int SizeLaw::draw(Rng& rng) const { return values[rng.categorical(cumulative())]; }

void DGPConfig::validate() const {
  if (cluster_count < 1) throw argument_error("cluster_count must be >= 1");
  if (beta_true.size() == 0 || !beta_true.allFinite()) {
    throw argument_error("beta_true must be a finite, non-empty vector");
  }
  if (!(covariate_sd > 0.0)) throw argument_error("covariate_sd must be > 0");
  size_law.validate();
  if (obs_per_subject) obs_per_subject->validate();
}

ScaleFactor gaussian_scale_matrix(const CorrelationStructure& structure,
                                  const ClusterData& layout) {
  Eigen::MatrixXd c = scale_matrix(structure, layout);
  const std::string context = "cluster layout of size " + std::to_string(layout.size());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c, Eigen::EigenvaluesOnly);
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -1e-10) {
    throw structure_error("scale matrix is not positive semidefinite (" + context +
                          ", min eigenvalue " + std::to_string(min_eig) + ")");
  }

  Eigen::MatrixXd target = c;
  if (min_eig <= 1e-8) {
    // Borderline factorization (rho near 1); bump and renormalize to keep a
    // unit diagonal.
    target = (c + 1e-8 * Eigen::MatrixXd::Identity(c.rows(), c.cols())) / (1.0 + 1e-8);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(target);
  if (llt.info() != Eigen::Success) {
    target = (c + 1e-7 * Eigen::MatrixXd::Identity(c.rows(), c.cols())) / (1.0 + 1e-7);
    llt.compute(target);
    if (llt.info() != Eigen::Success) {
      throw structure_error("Cholesky factorization failed (" + context + ")");
    }
  }
  return ScaleFactor{std::move(c), llt.matrixL()};
}

Eigen::VectorXd draw_frailties(const ScaleFactor& factor, Rng& rng) {
  const Eigen::Index n = factor.cholesky.rows();
  Eigen::VectorXd g1(n), g2(n);
  for (Eigen::Index k = 0; k < n; ++k) g1[k] = rng.normal();
  for (Eigen::Index k = 0; k < n; ++k) g2[k] = rng.normal();
  const Eigen::VectorXd w1 = factor.cholesky * g1;
  const Eigen::VectorXd w2 = factor.cholesky * g2;
  return 0.5 * (w1.array().square() + w2.array().square());
}

namespace {

// Layout for one cluster: positions and (optionally) subject labels, in the
// order the observations will be emitted.
ClusterData draw_layout(const DGPConfig& config, int label, Rng& rng) {
  ClusterData cluster;
  cluster.label = label;
  if (!config.three_level()) {
    const int n = config.size_law.draw(rng);
    cluster.observations.resize(n);
    for (int j = 0; j < n; ++j) cluster.observations[j].position = j;
    return cluster;
  }
  const int subjects = config.size_law.draw(rng);
  for (int s = 0; s < subjects; ++s) {
    const int n_s = config.obs_per_subject->draw(rng);
    for (int k = 0; k < n_s; ++k) {
      Observation obs;
      obs.subject = s;
      obs.position = k;
      cluster.observations.push_back(obs);
    }
  }
  return cluster;
}

}  // namespace

Dataset simulate_dataset(const DGPConfig& config) {
  config.validate();
  const int p = static_cast<int>(config.beta_true.size());

  Dataset ds;
  ds.three_level = config.three_level();
  ds.covariate_names.push_back("(intercept)");
  for (int c = 1; c < p; ++c) ds.covariate_names.push_back("x" + std::to_string(c));
  ds.clusters.resize(config.cluster_count);

  const Rng master(config.seed);
  for (int i = 0; i < config.cluster_count; ++i) {
    Rng rng = master.substream(static_cast<std::uint64_t>(i));
    ClusterData cluster = draw_layout(config, i, rng);
    const int n = cluster.size();

    for (auto& obs : cluster.observations) {
      obs.covariates.resize(p);
      obs.covariates[0] = 1.0;
      for (int c = 1; c < p; ++c) obs.covariates[c] = config.covariate_sd * rng.normal();
    }

    if (config.kind == DGPKind::FrailtyModel) {
      const ScaleFactor factor = gaussian_scale_matrix(config.structure_true, cluster);
      const Eigen::VectorXd z = draw_frailties(factor, rng);
      for (int j = 0; j < n; ++j) {
        auto& obs = cluster.observations[j];
        const double prob = std::exp(-z[j] * std::exp(-obs.covariates.dot(config.beta_true)));
        obs.outcome = rng.uniform() < prob ? 1 : 0;
      }
    } else {
      // One shared latent logistic variable per cluster.
      const double u = rng.uniform();
      const double latent = std::log(u) - std::log1p(-u);
      for (auto& obs : cluster.observations) {
        obs.outcome = obs.covariates.dot(config.beta_true) + latent > 0.0 ? 1 : 0;
      }
    }
    ds.clusters[i] = std::move(cluster);
  }
  return ds;
}

DGPConfig preset_scenario(const std::string& name, const std::vector<double>& rho_values) {
  DGPConfig config;
  config.beta_true.resize(2);
  config.beta_true << 1.0, -1.2;
  config.covariate_sd = 2.0;
  config.cluster_count = 200;

  const SizeLaw five_to_seven{{5, 6, 7}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  const auto need_rho = [&](std::size_t n) {
    if (rho_values.size() != n) {
      throw argument_error("scenario '" + name + "' takes " + std::to_string(n) +
                           " rho value(s), got " + std::to_string(rho_values.size()));
    }
  };

  if (name == "table1a") {
    need_rho(1);
    config.size_law = five_to_seven;
    config.structure_true = CorrelationStructure::exchangeable(rho_values[0]);
  } else if (name == "table1b") {
    need_rho(1);
    config.size_law = five_to_seven;
    config.structure_true = CorrelationStructure::ar1(rho_values[0]);
  } else if (name == "table2") {
    need_rho(2);
    config.size_law = SizeLaw{{2, 3}, {0.8, 0.2}};
    config.obs_per_subject = SizeLaw{{2, 3}, {0.8, 0.2}};
    config.structure_true =
        CorrelationStructure::nested_exch_exch(rho_values[0], rho_values[1]);
  } else if (name == "table3") {
    need_rho(0);
    config.kind = DGPKind::MisspecifiedLatentLogistic;
    config.size_law = five_to_seven;
    config.structure_true = CorrelationStructure::independence();
  } else {
    throw argument_error("unknown scenario '" + name + "'");
  }
  return config;
}

}  // namespace margex
