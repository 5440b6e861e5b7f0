#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace margex {

enum class ReportFormat { Json, Csv };

// Fit report: estimates, odds ratios, both SE flavors, and a provenance
// block (input hash, seed, version).
struct Report {
  std::vector<std::string> coefficients;
  Eigen::VectorXd beta;
  Eigen::VectorXd se_model;
  std::optional<Eigen::VectorXd> se_robust;  // absent for the MLE path
  std::vector<std::string> rho_names;
  Eigen::VectorXd rho;
  std::optional<Eigen::VectorXd> rho_se;
  double ci_level = 0.95;
  bool converged = false;
  std::string method;     // proposed | mle
  std::string structure;  // exch | ar1 | ...
  std::uint64_t seed = 0;
  std::string input_sha256;
};

std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);

// Tables 4-5 style rows: coefficient, OR, CI low, CI high.
std::string report_to_csv(const Report& report);

void write_report(const Report& report, ReportFormat format, const std::string& path);

// Hex SHA-256 of a file's bytes, for the provenance block.
std::string sha256_file(const std::string& path);

extern const char* const kVersion;

}  // namespace margex
