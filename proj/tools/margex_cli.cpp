// margex: fit / simulate / mc-study / verify for the marginalizable
// conditional model for clustered binary outcomes.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "margex/csv.hpp"
#include "margex/estimation.hpp"
#include "margex/frailty_sim.hpp"
#include "margex/mc_harness.hpp"
#include "margex/mle_oracle.hpp"
#include "margex/report.hpp"
#include "margex/variance.hpp"
#include "margex/verify.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitConvergence = 4;

struct FitArgs {
  std::string data;
  std::string structure = "exch";
  std::string method = "proposed";
  std::string mode = "four-step";
  std::string out;
  std::string format;
  double ci = 0.95;
  bool no_intercept = false;
  std::vector<double> rho_init;
};

margex::Report build_report_proposed(const margex::Dataset& ds, margex::CorrelationKind kind,
                                     const FitArgs& args) {
  margex::SolverConfig config;
  config.mode = args.mode == "alternate" ? margex::FitMode::AlternateToConvergence
                                         : margex::FitMode::FourStep;
  if (!args.rho_init.empty()) {
    config.rho_init = Eigen::Map<const Eigen::VectorXd>(args.rho_init.data(),
                                                        static_cast<long>(args.rho_init.size()));
  }
  const margex::FitResult fit = margex::fit(ds, kind, config);
  const margex::CovarianceReport cov =
      margex::covariance_report(ds, fit.theta_hat, args.ci, fit.rho_boundary);

  margex::Report report;
  report.coefficients = ds.covariate_names;
  report.beta = fit.theta_hat.beta;
  report.se_model = cov.se_model;
  report.se_robust = cov.se_robust;
  report.rho = fit.theta_hat.rho.params();
  report.rho_se = cov.rho_se;
  report.converged = fit.converged;
  if (!fit.converged) {
    throw margex::convergence_error("fit did not converge");
  }
  return report;
}

margex::Report build_report_mle(const margex::Dataset& ds, margex::CorrelationKind kind,
                                const FitArgs& args) {
  const margex::MLEResult fit = margex::fit_mle(ds, kind);
  const int p = ds.n_covariates();
  const Eigen::VectorXd se = fit.hessian_cov.diagonal().cwiseMax(0.0).cwiseSqrt();

  margex::Report report;
  report.coefficients = ds.covariate_names;
  report.beta = fit.theta_hat.beta;
  report.se_model = se.head(p);
  report.rho = fit.theta_hat.rho.params();
  if (fit.theta_hat.rho.dim() > 0 && !fit.rho_boundary) {
    report.rho_se = se.tail(fit.theta_hat.rho.dim()).eval();
  }
  report.converged = fit.converged;
  (void)args;
  return report;
}

int run_fit(const FitArgs& args) {
  margex::CsvOptions options;
  options.intercept = !args.no_intercept;
  const margex::Dataset ds = margex::read_csv(args.data, options);
  const margex::CorrelationKind kind = margex::correlation_kind_from_string(args.structure);

  margex::Report report = args.method == "mle" ? build_report_mle(ds, kind, args)
                                               : build_report_proposed(ds, kind, args);
  report.method = args.method;
  report.structure = args.structure;
  report.ci_level = args.ci;
  report.input_sha256 = margex::sha256_file(args.data);
  for (int l = 0; l < report.rho.size(); ++l) {
    report.rho_names.push_back(report.rho.size() == 1 ? "rho"
                                                      : "rho" + std::to_string(l + 2));
  }

  const bool csv = args.format == "csv" ||
                   (args.format.empty() && args.out.size() > 4 &&
                    args.out.substr(args.out.size() - 4) == ".csv");
  if (args.out.empty()) {
    std::cout << (csv ? margex::report_to_csv(report) : margex::report_to_json(report));
  } else {
    margex::write_report(report, csv ? margex::ReportFormat::Csv : margex::ReportFormat::Json,
                         args.out);
    std::cout << "wrote " << args.out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginalizable conditional model for clustered binary outcomes"};
  app.require_subcommand(1);

  // --- fit ---
  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model to a CSV dataset");
  fit_cmd->add_option("--data", fit_args.data, "Input CSV")->required();
  fit_cmd->add_option("--structure", fit_args.structure,
                      "exch|ar1|nested-exch|nested-ar1|indep");
  fit_cmd->add_option("--method", fit_args.method, "proposed|mle")
      ->check(CLI::IsMember({"proposed", "mle"}));
  fit_cmd->add_option("--mode", fit_args.mode, "four-step|alternate")
      ->check(CLI::IsMember({"four-step", "alternate"}));
  fit_cmd->add_option("--ci", fit_args.ci, "Confidence level (default 0.95)");
  fit_cmd->add_option("--rho-init", fit_args.rho_init, "Initial rho value(s)");
  fit_cmd->add_option("--out", fit_args.out, "Report path (default stdout)");
  fit_cmd->add_option("--format", fit_args.format, "json|csv (default by extension)")
      ->check(CLI::IsMember({"json", "csv"}));
  fit_cmd->add_flag("--no-intercept", fit_args.no_intercept, "Do not prepend an intercept");

  // --- simulate ---
  std::string sim_scenario = "table1a";
  std::vector<double> sim_rho;
  std::uint64_t sim_seed = 0;
  int sim_clusters = 0;
  std::string sim_out;
  auto* sim_cmd = app.add_subcommand("simulate", "Write a synthetic dataset");
  sim_cmd->add_option("--scenario", sim_scenario, "table1a|table1b|table2|table3");
  sim_cmd->add_option("--rho", sim_rho, "True rho value(s) for the scenario");
  sim_cmd->add_option("--seed", sim_seed, "RNG seed");
  sim_cmd->add_option("--clusters", sim_clusters, "Override the scenario's cluster count");
  sim_cmd->add_option("--out", sim_out, "Output CSV")->required();

  // --- mc-study ---
  std::string mc_scenario = "table1a";
  std::vector<double> mc_rho;
  int mc_reps = 1000;
  std::uint64_t mc_seed = 0;
  std::vector<std::string> mc_methods{"proposed"};
  double mc_ci = 0.95;
  int mc_clusters = 0;
  std::string mc_out;
  auto* mc_cmd = app.add_subcommand("mc-study", "Monte Carlo simulation study");
  mc_cmd->add_option("--scenario", mc_scenario, "table1a|table1b|table2|table3");
  mc_cmd->add_option("--rho", mc_rho, "True rho value(s)");
  mc_cmd->add_option("--reps", mc_reps, "Replicates (default 1000)");
  mc_cmd->add_option("--seed", mc_seed, "Master seed");
  mc_cmd->add_option("--methods", mc_methods, "proposed and/or mle")->delimiter(',');
  mc_cmd->add_option("--ci", mc_ci, "Confidence level");
  mc_cmd->add_option("--clusters", mc_clusters, "Override the scenario's cluster count");
  mc_cmd->add_option("--out", mc_out, "Summary CSV")->required();

  // --- verify ---
  std::uint64_t verify_seed = 20260801ULL;
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle/invariant suites");
  verify_cmd->add_option("--seed", verify_seed, "Seed for the randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (fit_cmd->parsed()) {
      return run_fit(fit_args);
    }
    if (sim_cmd->parsed()) {
      margex::DGPConfig config = margex::preset_scenario(sim_scenario, sim_rho);
      config.seed = sim_seed;
      if (sim_clusters > 0) config.cluster_count = sim_clusters;
      margex::write_csv(margex::simulate_dataset(config), sim_out);
      std::cout << "wrote " << sim_out << "\n";
      return 0;
    }
    if (mc_cmd->parsed()) {
      margex::StudySpec spec;
      spec.scenario = mc_scenario;
      spec.rho_values = mc_rho;
      spec.n_reps = mc_reps;
      spec.master_seed = mc_seed;
      spec.ci_level = mc_ci;
      spec.cluster_count = mc_clusters;
      spec.methods.clear();
      for (const auto& name : mc_methods) {
        spec.methods.push_back(margex::method_from_string(name));
      }
      const margex::MCSummary summary = margex::run_study(spec);
      margex::write_summary_csv(summary, mc_out);
      for (const auto& ms : summary.methods) {
        std::cout << margex::to_string(ms.method) << ": mean " << ms.mean_seconds
                  << " s/replicate, " << ms.n_failed << " failed\n";
      }
      std::cout << "wrote " << mc_out << "\n";
      return 0;
    }
    if (verify_cmd->parsed()) {
      const auto results = margex::run_verification(verify_seed);
      bool all_passed = true;
      for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
        if (!r.detail.empty()) std::cout << " — " << r.detail;
        std::cout << "\n";
        all_passed = all_passed && r.passed;
      }
      return all_passed ? 0 : 1;
    }
  } catch (const margex::parse_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const margex::io_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const margex::convergence_error& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const margex::separation_error& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const margex::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
