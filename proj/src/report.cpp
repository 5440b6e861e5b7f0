#include "margex/report.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "margex/errors.hpp"
#include "margex/variance.hpp"

namespace margex {

const char* const kVersion = "0.1.0";

namespace {

using nlohmann::json;

json vector_to_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::VectorXd vector_from_json(const json& arr) {
  Eigen::VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<Eigen::Index>(i)] = arr[i];
  return v;
}

json intervals_json(const Eigen::VectorXd& est, const Eigen::VectorXd& se, double level) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < est.size(); ++i) {
    const Interval ci = wald_ci(est[i], se[i], level);
    arr.push_back({ci.lo, ci.hi});
  }
  return arr;
}

std::string format_double(double x) {
  if (!std::isfinite(x)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string report_to_json(const Report& report) {
  json j;
  j["coefficients"] = report.coefficients;
  j["beta"] = vector_to_json(report.beta);
  j["or"] = vector_to_json(report.beta.array().exp());
  j["se_model"] = vector_to_json(report.se_model);
  j["ci_model"] = intervals_json(report.beta, report.se_model, report.ci_level);
  if (report.se_robust) {
    j["se_robust"] = vector_to_json(*report.se_robust);
    j["ci_robust"] = intervals_json(report.beta, *report.se_robust, report.ci_level);
  } else {
    j["se_robust"] = nullptr;
    j["ci_robust"] = nullptr;
  }
  j["rho_names"] = report.rho_names;
  j["rho"] = vector_to_json(report.rho);
  j["rho_se"] = report.rho_se ? vector_to_json(*report.rho_se) : json(nullptr);
  j["ci_level"] = report.ci_level;
  j["converged"] = report.converged;
  j["method"] = report.method;
  j["structure"] = report.structure;
  j["seed"] = report.seed;
  j["input_sha256"] = report.input_sha256;
  j["version"] = kVersion;
  return j.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw parse_error(std::string("invalid report JSON: ") + e.what());
  }
  Report report;
  try {
    report.coefficients = j.at("coefficients").get<std::vector<std::string>>();
    report.beta = vector_from_json(j.at("beta"));
    report.se_model = vector_from_json(j.at("se_model"));
    if (!j.at("se_robust").is_null()) report.se_robust = vector_from_json(j["se_robust"]);
    report.rho_names = j.at("rho_names").get<std::vector<std::string>>();
    report.rho = vector_from_json(j.at("rho"));
    if (!j.at("rho_se").is_null()) report.rho_se = vector_from_json(j["rho_se"]);
    report.ci_level = j.at("ci_level");
    report.converged = j.at("converged");
    report.method = j.at("method");
    report.structure = j.at("structure");
    report.seed = j.at("seed");
    report.input_sha256 = j.at("input_sha256");
  } catch (const json::exception& e) {
    throw parse_error(std::string("report JSON missing fields: ") + e.what());
  }
  return report;
}

std::string report_to_csv(const Report& report) {
  std::ostringstream out;
  out << "coefficient,or,ci_low,ci_high\n";
  for (std::size_t i = 0; i < report.coefficients.size(); ++i) {
    const Eigen::Index l = static_cast<Eigen::Index>(i);
    const Interval ci = wald_ci(report.beta[l], report.se_model[l], report.ci_level);
    out << report.coefficients[i] << ',' << format_double(std::exp(report.beta[l])) << ','
        << format_double(std::exp(ci.lo)) << ',' << format_double(std::exp(ci.hi)) << '\n';
  }
  for (std::size_t i = 0; i < report.rho_names.size(); ++i) {
    out << report.rho_names[i] << ','
        << format_double(report.rho[static_cast<Eigen::Index>(i)]) << ",,\n";
  }
  return out.str();
}

void write_report(const Report& report, ReportFormat format, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << (format == ReportFormat::Json ? report_to_json(report) : report_to_csv(report));
  if (!out) throw io_error("failed writing '" + path + "'");
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");

  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw io_error("sha256 initialization failed");
  }
  char buffer[1 << 16];
  while (in.good()) {
    in.read(buffer, sizeof(buffer));
    const std::streamsize got = in.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx, buffer, static_cast<std::size_t>(got)) != 1) {
      EVP_MD_CTX_free(ctx);
      throw io_error("sha256 update failed");
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw io_error("sha256 finalization failed");
  }
  EVP_MD_CTX_free(ctx);

  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace margex
