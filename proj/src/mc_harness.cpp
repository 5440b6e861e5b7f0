#include "margex/mc_harness.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "margex/estimation.hpp"
#include "margex/frailty_sim.hpp"
#include "margex/mle_oracle.hpp"
#include "margex/rng.hpp"
#include "margex/variance.hpp"

namespace margex {

std::string to_string(Method method) {
  return method == Method::Proposed ? "proposed" : "mle";
}

Method method_from_string(const std::string& name) {
  if (name == "proposed") return Method::Proposed;
  if (name == "mle") return Method::MLE;
  throw argument_error("unknown method '" + name + "'");
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

CorrelationKind scenario_fit_kind(const std::string& scenario) {
  if (scenario == "table1a" || scenario == "table3") return CorrelationKind::Exchangeable;
  if (scenario == "table1b") return CorrelationKind::AR1;
  if (scenario == "table2") return CorrelationKind::NestedExchExch;
  throw argument_error("unknown scenario '" + scenario + "'");
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MARGEX_THREADS")) {
    const int parsed = std::atoi(env);
    if (parsed > 0) return parsed;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Everything one replicate contributes for one method.
struct RepFit {
  bool ok = false;
  std::string error;
  std::vector<double> estimates;
  std::vector<double> ses_model;
  std::vector<double> ses_robust;
  double seconds = 0.0;
};

struct RepOutcome {
  std::vector<RepFit> fits;  // parallel to spec.methods
};

std::vector<std::string> parameter_names(int p, int q) {
  std::vector<std::string> names;
  for (int l = 0; l < p; ++l) names.push_back("beta" + std::to_string(l));
  if (q == 1) names.push_back("rho");
  if (q == 2) {
    names.push_back("rho2");
    names.push_back("rho3");
  }
  return names;
}

RepFit run_proposed(const Dataset& ds, CorrelationKind kind, double ci_level) {
  RepFit fit_out;
  const FitResult res = fit(ds, kind);
  const int p = static_cast<int>(res.theta_hat.beta.size());
  const int q = res.theta_hat.rho.dim();
  const CovarianceReport cov =
      covariance_report(ds, res.theta_hat, ci_level, res.rho_boundary);
  for (int l = 0; l < p; ++l) {
    fit_out.estimates.push_back(res.theta_hat.beta[l]);
    fit_out.ses_model.push_back(cov.se_model[l]);
    fit_out.ses_robust.push_back(cov.se_robust[l]);
  }
  for (int l = 0; l < q; ++l) {
    fit_out.estimates.push_back(res.theta_hat.rho.params()[l]);
    fit_out.ses_model.push_back(cov.rho_se ? (*cov.rho_se)[l] : kNaN);
    fit_out.ses_robust.push_back(kNaN);
  }
  fit_out.ok = true;
  return fit_out;
}

RepFit run_mle(const Dataset& ds, CorrelationKind kind, double /*ci_level*/) {
  RepFit fit_out;
  const MLEResult res = fit_mle(ds, kind);
  const int p = static_cast<int>(res.theta_hat.beta.size());
  const int q = res.theta_hat.rho.dim();
  const Eigen::VectorXd se = res.hessian_cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  for (int l = 0; l < p; ++l) {
    fit_out.estimates.push_back(res.theta_hat.beta[l]);
    fit_out.ses_model.push_back(se[l]);
    fit_out.ses_robust.push_back(kNaN);
  }
  for (int l = 0; l < q; ++l) {
    fit_out.estimates.push_back(res.theta_hat.rho.params()[l]);
    fit_out.ses_model.push_back(res.rho_boundary ? kNaN : se[p + l]);
    fit_out.ses_robust.push_back(kNaN);
  }
  fit_out.ok = true;
  return fit_out;
}

}  // namespace

ParameterSummary summarize(const std::vector<double>& estimates,
                           const std::vector<double>& ses_model,
                           const std::vector<double>& ses_robust,
                           std::optional<double> truth, double ci_level,
                           const std::string& name) {
  if (estimates.size() != ses_model.size() || estimates.size() != ses_robust.size()) {
    throw argument_error("summarize: replicate vectors must have equal length");
  }
  ParameterSummary row;
  row.name = name;
  row.truth = truth;
  row.n_used = static_cast<int>(estimates.size());
  if (estimates.empty()) return row;

  const double n = static_cast<double>(estimates.size());
  double mean = 0.0;
  for (double e : estimates) mean += e;
  mean /= n;
  double var = 0.0;
  for (double e : estimates) var += (e - mean) * (e - mean);
  var /= n;
  if (estimates.size() > 1) row.sse = std::sqrt(var);

  const auto mean_of = [](const std::vector<double>& xs) -> std::optional<double> {
    double total = 0.0;
    int count = 0;
    for (double x : xs) {
      if (std::isfinite(x)) {
        total += x;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return total / count;
  };
  row.see_model = mean_of(ses_model);
  row.see_robust = mean_of(ses_robust);

  if (truth) {
    row.bias = mean - *truth;
    double mse = 0.0;
    for (double e : estimates) mse += (e - *truth) * (e - *truth);
    row.mse = mse / n;

    const auto coverage_of = [&](const std::vector<double>& ses) -> std::optional<double> {
      int covered = 0, count = 0;
      for (std::size_t r = 0; r < estimates.size(); ++r) {
        if (!std::isfinite(ses[r])) continue;
        ++count;
        if (wald_ci(estimates[r], ses[r], ci_level).contains(*truth)) ++covered;
      }
      if (count == 0) return std::nullopt;
      return static_cast<double>(covered) / count;
    };
    row.coverage_model = coverage_of(ses_model);
    row.coverage_robust = coverage_of(ses_robust);
  }
  return row;
}

MCSummary run_study(const StudySpec& spec) {
  if (spec.n_reps < 1) throw argument_error("run_study: n_reps must be >= 1");
  if (spec.methods.empty()) throw argument_error("run_study: no methods requested");

  DGPConfig config = preset_scenario(spec.scenario, spec.rho_values);
  if (spec.cluster_count > 0) config.cluster_count = spec.cluster_count;
  const CorrelationKind fit_kind = scenario_fit_kind(spec.scenario);
  const int p = static_cast<int>(config.beta_true.size());
  const int q = correlation_dim(fit_kind);

  // Truths: beta always; rho only when the generating model is the frailty
  // model (under the misspecified DGP the composite-likelihood limit of
  // rho-hat is left unspecified).
  std::vector<std::optional<double>> truths;
  for (int l = 0; l < p; ++l) truths.emplace_back(config.beta_true[l]);
  for (int l = 0; l < q; ++l) {
    if (config.kind == DGPKind::FrailtyModel) {
      truths.emplace_back(spec.rho_values[l]);
    } else {
      truths.emplace_back(std::nullopt);
    }
  }
  const std::vector<std::string> names = parameter_names(p, q);

  std::vector<RepOutcome> outcomes(spec.n_reps);
  std::atomic<int> next_rep{0};
  const auto worker = [&]() {
    while (true) {
      const int r = next_rep.fetch_add(1);
      if (r >= spec.n_reps) break;
      DGPConfig rep_config = config;
      rep_config.seed = substream_seed(spec.master_seed, static_cast<std::uint64_t>(r));
      const Dataset ds = simulate_dataset(rep_config);
      RepOutcome& outcome = outcomes[r];
      outcome.fits.resize(spec.methods.size());
      for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
        const auto start = std::chrono::steady_clock::now();
        try {
          outcome.fits[mi] = spec.methods[mi] == Method::Proposed
                                 ? run_proposed(ds, fit_kind, spec.ci_level)
                                 : run_mle(ds, fit_kind, spec.ci_level);
        } catch (const error& e) {
          outcome.fits[mi].ok = false;
          outcome.fits[mi].error = e.what();
        }
        outcome.fits[mi].seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
    }
  };

  const int n_threads = std::min(resolve_threads(spec.threads), spec.n_reps);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  MCSummary summary;
  summary.scenario = spec.scenario;
  summary.rho_values = spec.rho_values;
  summary.n_reps = spec.n_reps;
  summary.master_seed = spec.master_seed;
  summary.ci_level = spec.ci_level;

  const int n_params = p + q;
  for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
    MethodSummary ms;
    ms.method = spec.methods[mi];
    std::vector<std::vector<double>> est(n_params), sem(n_params), ser(n_params);
    double seconds = 0.0;
    int used = 0;
    for (int r = 0; r < spec.n_reps; ++r) {
      const RepFit& f = outcomes[r].fits[mi];
      seconds += f.seconds;
      if (!f.ok) {
        ++ms.n_failed;
        if (ms.failure_reasons.size() < 10) {
          ms.failure_reasons.push_back("rep " + std::to_string(r) + ": " + f.error);
        }
        continue;
      }
      ++used;
      for (int l = 0; l < n_params; ++l) {
        est[l].push_back(f.estimates[l]);
        sem[l].push_back(f.ses_model[l]);
        ser[l].push_back(f.ses_robust[l]);
      }
    }
    ms.mean_seconds = spec.n_reps > 0 ? seconds / spec.n_reps : 0.0;
    for (int l = 0; l < n_params; ++l) {
      ms.parameters.push_back(
          summarize(est[l], sem[l], ser[l], truths[l], spec.ci_level, names[l]));
    }
    if (ms.n_failed > 0.05 * spec.n_reps) {
      throw study_error("run_study: method " + to_string(ms.method) + " failed " +
                        std::to_string(ms.n_failed) + "/" + std::to_string(spec.n_reps) +
                        " replicates; first: " +
                        (ms.failure_reasons.empty() ? "?" : ms.failure_reasons.front()));
    }
    summary.methods.push_back(std::move(ms));
  }
  return summary;
}

namespace {

// Shortest round-trip decimal form, identical across runs.
std::string format_double(double x) {
  if (!std::isfinite(x)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::string format_optional(const std::optional<double>& x) {
  return x ? format_double(*x) : "";
}

}  // namespace

std::string summary_to_csv(const MCSummary& summary) {
  std::ostringstream out;
  out << "scenario,method,parameter,truth,bias,sse,see_model,see_robust,mse,"
         "coverage_model,coverage_robust,n_used,n_failed\n";
  for (const auto& ms : summary.methods) {
    for (const auto& row : ms.parameters) {
      out << summary.scenario << ',' << to_string(ms.method) << ',' << row.name << ','
          << format_optional(row.truth) << ',' << format_optional(row.bias) << ','
          << format_optional(row.sse) << ',' << format_optional(row.see_model) << ','
          << format_optional(row.see_robust) << ',' << format_optional(row.mse) << ','
          << format_optional(row.coverage_model) << ','
          << format_optional(row.coverage_robust) << ',' << row.n_used << ','
          << ms.n_failed << '\n';
    }
  }
  return out.str();
}

void write_summary_csv(const MCSummary& summary, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << summary_to_csv(summary);
  if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace margex
