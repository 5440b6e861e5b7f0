#include "margex/types.hpp"

#include <cmath>
#include <set>
#include <utility>

namespace margex {

void ClusterData::validate() const {
  if (observations.empty()) {
    throw argument_error("cluster " + std::to_string(label) + " is empty");
  }
  const auto p = observations.front().covariates.size();
  const bool nested = observations.front().subject.has_value();
  std::set<std::pair<int, int>> seen;
  for (const auto& obs : observations) {
    if (obs.covariates.size() != p) {
      throw argument_error("cluster " + std::to_string(label) +
                           ": covariate length differs across observations");
    }
    if (!obs.covariates.allFinite()) {
      throw argument_error("cluster " + std::to_string(label) +
                           ": non-finite covariate");
    }
    if (obs.outcome != 0 && obs.outcome != 1) {
      throw argument_error("cluster " + std::to_string(label) +
                           ": outcome must be 0 or 1");
    }
    if (obs.subject.has_value() != nested) {
      throw argument_error("cluster " + std::to_string(label) +
                           ": subject labels must be all-or-nothing");
    }
    // Positions must be unique within a subject (three-level) or within the
    // cluster (two-level); AR(1) lags are undefined otherwise.
    const int unit = nested ? *obs.subject : 0;
    if (!seen.insert({unit, obs.position}).second) {
      throw argument_error("cluster " + std::to_string(label) +
                           ": duplicate position within a unit");
    }
  }
}

int correlation_dim(CorrelationKind kind) {
  switch (kind) {
    case CorrelationKind::Independence:
      return 0;
    case CorrelationKind::Exchangeable:
    case CorrelationKind::AR1:
      return 1;
    case CorrelationKind::NestedExchExch:
    case CorrelationKind::NestedExchAR1:
      return 2;
  }
  return 0;
}

bool is_nested(CorrelationKind kind) {
  return kind == CorrelationKind::NestedExchExch || kind == CorrelationKind::NestedExchAR1;
}

std::string to_string(CorrelationKind kind) {
  switch (kind) {
    case CorrelationKind::Independence:
      return "indep";
    case CorrelationKind::Exchangeable:
      return "exch";
    case CorrelationKind::AR1:
      return "ar1";
    case CorrelationKind::NestedExchExch:
      return "nested-exch";
    case CorrelationKind::NestedExchAR1:
      return "nested-ar1";
  }
  return "?";
}

CorrelationKind correlation_kind_from_string(const std::string& name) {
  if (name == "indep" || name == "independence") return CorrelationKind::Independence;
  if (name == "exch" || name == "exchangeable") return CorrelationKind::Exchangeable;
  if (name == "ar1") return CorrelationKind::AR1;
  if (name == "nested-exch") return CorrelationKind::NestedExchExch;
  if (name == "nested-ar1") return CorrelationKind::NestedExchAR1;
  throw argument_error("unknown correlation structure '" + name + "'");
}

CorrelationStructure::CorrelationStructure(CorrelationKind kind, Eigen::VectorXd params)
    : kind_(kind), params_(std::move(params)) {
  const int q = correlation_dim(kind);
  if (params_.size() != q) {
    throw argument_error("structure " + to_string(kind) + " takes " + std::to_string(q) +
                         " parameter(s), got " + std::to_string(params_.size()));
  }
  if (!params_.allFinite()) {
    throw domain_error("correlation parameters must be finite");
  }
  switch (kind) {
    case CorrelationKind::Independence:
      break;
    case CorrelationKind::Exchangeable:
    case CorrelationKind::AR1:
      if (params_[0] < 0.0 || params_[0] > 1.0) {
        throw domain_error("rho must lie in [0, 1], got " + std::to_string(params_[0]));
      }
      break;
    case CorrelationKind::NestedExchExch:
    case CorrelationKind::NestedExchAR1:
      if (params_[0] < 0.0 || params_[1] < 0.0 || params_[0] + params_[1] > 1.0) {
        throw domain_error("nested structure needs rho2 >= 0, rho3 >= 0, rho2 + rho3 <= 1");
      }
      break;
  }
}

CorrelationStructure CorrelationStructure::exchangeable(double rho) {
  return CorrelationStructure(CorrelationKind::Exchangeable, Eigen::VectorXd::Constant(1, rho));
}

CorrelationStructure CorrelationStructure::ar1(double rho) {
  return CorrelationStructure(CorrelationKind::AR1, Eigen::VectorXd::Constant(1, rho));
}

CorrelationStructure CorrelationStructure::nested_exch_exch(double rho2, double rho3) {
  Eigen::VectorXd p(2);
  p << rho2, rho3;
  return CorrelationStructure(CorrelationKind::NestedExchExch, p);
}

CorrelationStructure CorrelationStructure::nested_exch_ar1(double rho2, double rho3) {
  Eigen::VectorXd p(2);
  p << rho2, rho3;
  return CorrelationStructure(CorrelationKind::NestedExchAR1, p);
}

namespace {

int require_subject(const Observation& obs) {
  if (!obs.subject.has_value()) {
    throw structure_error("nested correlation structure requires subject labels");
  }
  return *obs.subject;
}

}  // namespace

double rho_pair(const CorrelationStructure& structure, const Observation& obs_j,
                const Observation& obs_k) {
  const auto& rho = structure.params();
  switch (structure.kind()) {
    case CorrelationKind::Independence:
      return 0.0;
    case CorrelationKind::Exchangeable:
      return rho[0];
    case CorrelationKind::AR1: {
      const int lag = std::abs(obs_j.position - obs_k.position);
      return std::pow(rho[0], lag);
    }
    case CorrelationKind::NestedExchExch: {
      const bool same = require_subject(obs_j) == require_subject(obs_k);
      return same ? rho[0] + rho[1] : rho[0];
    }
    case CorrelationKind::NestedExchAR1: {
      const bool same = require_subject(obs_j) == require_subject(obs_k);
      if (!same) return rho[0];
      const int lag = std::abs(obs_j.position - obs_k.position);
      return rho[0] + std::pow(rho[1], lag);
    }
  }
  return 0.0;
}

namespace {

// d(rho^lag)/d rho with the lag = 1, rho = 0 case handled (0^0 := 1).
double ar1_chain(double rho, int lag) {
  if (lag == 1) return 1.0;
  return lag * std::pow(rho, lag - 1);
}

}  // namespace

Eigen::VectorXd rho_pair_gradient(const CorrelationStructure& structure,
                                  const Observation& obs_j, const Observation& obs_k) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(structure.dim());
  const auto& rho = structure.params();
  switch (structure.kind()) {
    case CorrelationKind::Independence:
      break;
    case CorrelationKind::Exchangeable:
      g[0] = 1.0;
      break;
    case CorrelationKind::AR1:
      g[0] = ar1_chain(rho[0], std::abs(obs_j.position - obs_k.position));
      break;
    case CorrelationKind::NestedExchExch:
      g[0] = 1.0;
      g[1] = require_subject(obs_j) == require_subject(obs_k) ? 1.0 : 0.0;
      break;
    case CorrelationKind::NestedExchAR1:
      g[0] = 1.0;
      if (require_subject(obs_j) == require_subject(obs_k)) {
        g[1] = ar1_chain(rho[1], std::abs(obs_j.position - obs_k.position));
      }
      break;
  }
  return g;
}

int Dataset::n_covariates() const {
  if (clusters.empty() || clusters.front().observations.empty()) return 0;
  return static_cast<int>(clusters.front().observations.front().covariates.size());
}

long Dataset::n_obs() const {
  long n = 0;
  for (const auto& c : clusters) n += c.size();
  return n;
}

void Dataset::validate() const {
  if (clusters.empty()) throw argument_error("dataset has no clusters");
  const int p = n_covariates();
  for (const auto& cluster : clusters) {
    cluster.validate();
    if (cluster.observations.front().covariates.size() != p) {
      throw argument_error("covariate dimension differs across clusters");
    }
    if (cluster.three_level() != three_level) {
      throw argument_error("subject labels inconsistent with dataset mode");
    }
  }
}

}  // namespace margex
