#pragma once

#include <iosfwd>
#include <string>

#include "margex/types.hpp"

namespace margex {

struct CsvOptions {
  bool intercept = true;  // prepend a column of 1s
};

// Standard format: header row with `cluster` (int, required), `subject`
// (int, optional -> three-level), `time` (int, optional -> AR(1) positions,
// defaults to row order within the unit), `y` (0/1, required); every other
// column is a numeric covariate.
Dataset read_csv(const std::string& path, const CsvOptions& options = {});
Dataset read_csv_stream(std::istream& in, const CsvOptions& options = {});

// Inverse of read_csv for the standard format (losslessly round-trips).
void write_csv(const Dataset& dataset, const std::string& path);
std::string dataset_to_csv(const Dataset& dataset);

}  // namespace margex
