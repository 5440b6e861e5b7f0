#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace margex {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Oracle-vs-closed-form suites. Each check is deterministic for a fixed seed.
CheckResult check_pairwise_kernel(std::uint64_t seed, int n_draws = 1000,
                                  long mc_draws = 10'000'000);
CheckResult check_pattern_normalization(std::uint64_t seed, int clusters_per_structure = 200);
CheckResult check_rho_score_gradient(std::uint64_t seed, int instances_per_structure = 100);
CheckResult check_oracle_equivalences(std::uint64_t seed);
CheckResult check_frailty_sampling(std::uint64_t seed, long n_draws = 1'000'000);

std::vector<CheckResult> run_verification(std::uint64_t seed = 20260801ULL);

}  // namespace margex
