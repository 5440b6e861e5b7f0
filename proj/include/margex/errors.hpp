#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace margex {

// Error taxonomy. The CLI maps these onto exit codes: parse/data -> 3,
// convergence/separation -> 4, anything else -> 1.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad caller input (dimension mismatch, unknown name, invalid option).
class argument_error : public error {
 public:
  using error::error;
};

// Parameter outside its mathematical domain (rho out of range, non-PSD C).
class domain_error : public error {
 public:
  using error::error;
};

// Correlation structure incompatible with the data layout.
class structure_error : public error {
 public:
  using error::error;
};

// Numerical failure (singular system, nonpositive probability from roundoff).
class numeric_error : public error {
 public:
  using error::error;
};

// Iterative solver exhausted its budget. Carries the score-norm trace.
class convergence_error : public error {
 public:
  convergence_error(const std::string& msg, std::vector<double> trace = {})
      : error(msg), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

// Diverging coefficients (complete or quasi-complete separation).
class separation_error : public error {
 public:
  using error::error;
};

// Work would exceed a configured cap (e.g. exponential likelihood cost).
class resource_error : public error {
 public:
  using error::error;
};

// Malformed input data. `row` is 1-based (header = row 1), 0 if unknown.
class parse_error : public error {
 public:
  parse_error(const std::string& msg, long row = 0) : error(msg), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

class io_error : public error {
 public:
  using error::error;
};

// Monte Carlo study failed too many replicates.
class study_error : public error {
 public:
  using error::error;
};

// Estimate sits on the parameter-space boundary; asymptotics do not apply.
class boundary_error : public error {
 public:
  using error::error;
};

}  // namespace margex
