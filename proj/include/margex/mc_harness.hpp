#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "margex/types.hpp"

namespace margex {

enum class Method { Proposed, MLE };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

struct StudySpec {
  std::string scenario;            // table1a | table1b | table2 | table3
  std::vector<double> rho_values;  // truth for the scenario's structure
  int n_reps = 1000;
  std::vector<Method> methods{Method::Proposed};
  std::uint64_t master_seed = 0;
  double ci_level = 0.95;
  int threads = 0;       // 0 = MARGEX_THREADS env var, else hardware
  int cluster_count = 0; // 0 = scenario default (200)
};

// One Table 1-3 style row. Missing pieces (no SEs, single rep) stay unset.
struct ParameterSummary {
  std::string name;
  std::optional<double> truth;
  std::optional<double> bias;
  std::optional<double> sse;         // Monte Carlo sd of the estimates
  std::optional<double> see_model;   // mean of model-based SEs
  std::optional<double> see_robust;  // mean of robust SEs
  std::optional<double> mse;
  std::optional<double> coverage_model;
  std::optional<double> coverage_robust;
  int n_used = 0;
};

struct MethodSummary {
  Method method = Method::Proposed;
  std::vector<ParameterSummary> parameters;
  double mean_seconds = 0.0;  // wall clock; reported, never serialized
  int n_failed = 0;
  std::vector<std::string> failure_reasons;
};

struct MCSummary {
  std::string scenario;
  std::vector<double> rho_values;
  int n_reps = 0;
  std::uint64_t master_seed = 0;
  double ci_level = 0.95;
  std::vector<MethodSummary> methods;
};

// Replicate vectors -> one summary row. NaN entries mark replicates without
// that piece (e.g. no rho SE when rho-hat sat on the boundary); they drop out
// of SEE means and coverage denominators. SSE uses the 1/n divisor so that
// MSE = SSE^2 + bias^2 holds exactly.
ParameterSummary summarize(const std::vector<double>& estimates,
                           const std::vector<double>& ses_model,
                           const std::vector<double>& ses_robust,
                           std::optional<double> truth, double ci_level,
                           const std::string& name);

// Runs the scenario: one simulated dataset and fit per replicate, each on its
// own seed substream, summaries merged in replicate order. Deterministic for
// a fixed master seed regardless of the worker count. Throws study_error when
// more than 5% of replicates fail for any requested method.
MCSummary run_study(const StudySpec& spec);

// Statistical summary as CSV. Timing is excluded so the artifact is
// byte-identical across worker counts.
void write_summary_csv(const MCSummary& summary, const std::string& path);
std::string summary_to_csv(const MCSummary& summary);

}  // namespace margex
