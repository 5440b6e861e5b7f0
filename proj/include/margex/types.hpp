#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "margex/errors.hpp"

namespace margex {

// One binary outcome with its covariate row. The first covariate entry is the
// intercept (fixed at 1) unless the dataset was built with --no-intercept.
// `position` is the integer time/order index used for AR(1) lags; `subject`
// labels the level-two unit in three-level data.
struct Observation {
  Eigen::VectorXd covariates;
  int outcome = 0;
  int position = 0;
  std::optional<int> subject;
};

// One cluster: the unit of independence.
struct ClusterData {
  std::vector<Observation> observations;
  int label = 0;

  int size() const { return static_cast<int>(observations.size()); }
  bool three_level() const {
    return !observations.empty() && observations.front().subject.has_value();
  }
  void validate() const;
};

enum class CorrelationKind {
  Independence,
  Exchangeable,
  AR1,
  NestedExchExch,
  NestedExchAR1,
};

int correlation_dim(CorrelationKind kind);
bool is_nested(CorrelationKind kind);
std::string to_string(CorrelationKind kind);
CorrelationKind correlation_kind_from_string(const std::string& name);

// Parametrized frailty-correlation family. Pairwise values rho_jk live in
// [0, 1]; scalar kinds accept rho = 1 for probability-kernel evaluation but
// fitting stays inside [0, 1).
class CorrelationStructure {
 public:
  CorrelationStructure() : kind_(CorrelationKind::Independence) {}
  CorrelationStructure(CorrelationKind kind, Eigen::VectorXd params);

  static CorrelationStructure independence() { return CorrelationStructure(); }
  static CorrelationStructure exchangeable(double rho);
  static CorrelationStructure ar1(double rho);
  static CorrelationStructure nested_exch_exch(double rho2, double rho3);
  static CorrelationStructure nested_exch_ar1(double rho2, double rho3);

  CorrelationKind kind() const { return kind_; }
  const Eigen::VectorXd& params() const { return params_; }
  int dim() const { return static_cast<int>(params_.size()); }
  bool nested() const { return is_nested(kind_); }

  // Same kind, new parameter values (revalidated).
  CorrelationStructure with_params(const Eigen::VectorXd& params) const {
    return CorrelationStructure(kind_, params);
  }

 private:
  CorrelationKind kind_;
  Eigen::VectorXd params_;
};

// Frailty correlation between two observations under a structure.
double rho_pair(const CorrelationStructure& structure, const Observation& obs_j,
                const Observation& obs_k);

// Gradient of rho_pair with respect to the structure parameters (length q).
Eigen::VectorXd rho_pair_gradient(const CorrelationStructure& structure,
                                  const Observation& obs_j, const Observation& obs_k);

// Full parameter bundle (beta, rho).
struct Theta {
  Eigen::VectorXd beta;
  CorrelationStructure rho;
};

// A set of independent clusters plus column metadata.
struct Dataset {
  std::vector<ClusterData> clusters;
  std::vector<std::string> covariate_names;
  bool three_level = false;

  int n_clusters() const { return static_cast<int>(clusters.size()); }
  int n_covariates() const;
  long n_obs() const;
  void validate() const;
};

}  // namespace margex
