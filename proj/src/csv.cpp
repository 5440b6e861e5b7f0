#include "margex/csv.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace margex {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan";
}

long parse_int(const std::string& cell, const std::string& what, long row) {
  if (is_missing(cell)) throw parse_error("row " + std::to_string(row) + ": missing " + what, row);
  long value = 0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
    throw parse_error("row " + std::to_string(row) + ": " + what + " must be an integer, got '" +
                          cell + "'",
                      row);
  }
  return value;
}

double parse_double(const std::string& cell, const std::string& what, long row) {
  if (is_missing(cell)) throw parse_error("row " + std::to_string(row) + ": missing " + what, row);
  double value = 0.0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
    throw parse_error("row " + std::to_string(row) + ": " + what + " must be numeric, got '" +
                          cell + "'",
                      row);
  }
  return value;
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace

Dataset read_csv_stream(std::istream& in, const CsvOptions& options) {
  std::string line;
  if (!std::getline(in, line)) throw parse_error("empty input: no header row", 1);
  const std::vector<std::string> header = split_line(line);

  int col_cluster = -1, col_subject = -1, col_time = -1, col_y = -1;
  std::vector<int> covariate_cols;
  std::vector<std::string> covariate_names;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const std::string& name = header[c];
    if (name == "cluster") {
      col_cluster = c;
    } else if (name == "subject") {
      col_subject = c;
    } else if (name == "time") {
      col_time = c;
    } else if (name == "y") {
      col_y = c;
    } else {
      covariate_cols.push_back(c);
      covariate_names.push_back(name);
    }
  }
  if (col_cluster < 0) throw parse_error("missing required column 'cluster'", 1);
  if (col_y < 0) throw parse_error("missing required column 'y'", 1);

  Dataset ds;
  ds.three_level = col_subject >= 0;
  if (options.intercept) ds.covariate_names.push_back("(intercept)");
  ds.covariate_names.insert(ds.covariate_names.end(), covariate_names.begin(),
                            covariate_names.end());

  std::unordered_map<long, std::size_t> cluster_index;
  // Row-order counters so positions default to within-unit order.
  std::unordered_map<long, std::unordered_map<long, int>> order_counter;

  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) {
      throw parse_error("row " + std::to_string(row) + ": expected " +
                            std::to_string(header.size()) + " cells, got " +
                            std::to_string(cells.size()),
                        row);
    }

    const long cluster_label = parse_int(cells[col_cluster], "cluster", row);
    Observation obs;
    const long y = parse_int(cells[col_y], "y", row);
    if (y != 0 && y != 1) {
      throw parse_error("row " + std::to_string(row) + ": y must be 0 or 1, got " +
                            std::to_string(y),
                        row);
    }
    obs.outcome = static_cast<int>(y);
    long subject_label = 0;
    if (col_subject >= 0) {
      subject_label = parse_int(cells[col_subject], "subject", row);
      obs.subject = static_cast<int>(subject_label);
    }
    if (col_time >= 0) {
      obs.position = static_cast<int>(parse_int(cells[col_time], "time", row));
    } else {
      obs.position = order_counter[cluster_label][subject_label]++;
    }

    const int extra = options.intercept ? 1 : 0;
    obs.covariates.resize(static_cast<int>(covariate_cols.size()) + extra);
    if (options.intercept) obs.covariates[0] = 1.0;
    for (std::size_t k = 0; k < covariate_cols.size(); ++k) {
      obs.covariates[extra + static_cast<int>(k)] =
          parse_double(cells[covariate_cols[k]], "covariate '" + covariate_names[k] + "'", row);
    }

    auto [it, inserted] = cluster_index.try_emplace(cluster_label, ds.clusters.size());
    if (inserted) {
      ClusterData cluster;
      cluster.label = static_cast<int>(cluster_label);
      ds.clusters.push_back(std::move(cluster));
    }
    ds.clusters[it->second].observations.push_back(std::move(obs));
  }

  if (ds.clusters.empty()) throw parse_error("no data rows", row);
  if (ds.n_covariates() == 0) {
    throw parse_error("no covariate columns (and intercept disabled)", 1);
  }
  try {
    ds.validate();
  } catch (const error& e) {
    throw parse_error(std::string("invalid dataset: ") + e.what(), 0);
  }
  return ds;
}

Dataset read_csv(const std::string& path, const CsvOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");
  return read_csv_stream(in, options);
}

std::string dataset_to_csv(const Dataset& dataset) {
  const bool has_intercept =
      !dataset.covariate_names.empty() && dataset.covariate_names.front() == "(intercept)";
  const int first_covariate = has_intercept ? 1 : 0;

  std::ostringstream out;
  out << "cluster";
  if (dataset.three_level) out << ",subject";
  out << ",time,y";
  for (std::size_t c = first_covariate; c < dataset.covariate_names.size(); ++c) {
    out << ',' << dataset.covariate_names[c];
  }
  out << '\n';
  for (const auto& cluster : dataset.clusters) {
    for (const auto& obs : cluster.observations) {
      out << cluster.label;
      if (dataset.three_level) out << ',' << obs.subject.value_or(0);
      out << ',' << obs.position << ',' << obs.outcome;
      for (int c = first_covariate; c < obs.covariates.size(); ++c) {
        out << ',' << format_double(obs.covariates[c]);
      }
      out << '\n';
    }
  }
  return out.str();
}

void write_csv(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << dataset_to_csv(dataset);
  if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace margex
