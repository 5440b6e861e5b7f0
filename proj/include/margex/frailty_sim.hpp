#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "margex/rng.hpp"
#include "margex/types.hpp"

namespace margex {

enum class DGPKind { FrailtyModel, MisspecifiedLatentLogistic };

// Categorical law over unit sizes.
struct SizeLaw {
  std::vector<int> values;
  std::vector<double> probs;

  void validate() const;
  std::vector<double> cumulative() const;
  int draw(Rng& rng) const;
};

struct DGPConfig {
  DGPKind kind = DGPKind::FrailtyModel;
  Eigen::VectorXd beta_true;
  CorrelationStructure structure_true;
  int cluster_count = 1;
  // Two-level: observations per cluster. Three-level: subjects per cluster,
  // with `obs_per_subject` set.
  SizeLaw size_law;
  std::optional<SizeLaw> obs_per_subject;
  double covariate_sd = 2.0;
  std::uint64_t seed = 0;

  bool three_level() const { return obs_per_subject.has_value(); }
  void validate() const;
};

// Gaussian-scale matrix of a cluster layout together with the lower Cholesky
// factor used for sampling. A borderline factorization (minimum eigenvalue in
// [-1e-10, 1e-8]) is repaired by a 1e-8 diagonal bump plus renormalization.
struct ScaleFactor {
  Eigen::MatrixXd c;
  Eigen::MatrixXd cholesky;
};

ScaleFactor gaussian_scale_matrix(const CorrelationStructure& structure,
                                  const ClusterData& layout);

// Z_k = (W1_k^2 + W2_k^2)/2 for two independent N(0, C) vectors: marginally
// Exp(1) with cor(Z) the elementwise square of C.
Eigen::VectorXd draw_frailties(const ScaleFactor& factor, Rng& rng);

// Synthetic clustered binary data. Pure function of the config (clusters own
// independent substreams of config.seed, so generation order cannot matter).
Dataset simulate_dataset(const DGPConfig& config);

// Simulation-study presets; all use beta = (1, -1.2) and covariate sd 2 over
// 200 clusters.
DGPConfig preset_scenario(const std::string& name, const std::vector<double>& rho_values);

}  // namespace margex
