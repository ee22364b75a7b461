// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace diffuse {

struct OracleCheckOptions {
  std::uint64_t seed = 7;
  /// Replaces sigma(t) of the Base schedule before the checks run.
  std::optional<std::pair<int, double>> corrupt_sigma;
  int mc_trajectories = 100000;
  /// Runs only checks whose name starts with this prefix (all when empty).
  std::string only;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // measured values and thresholds
};

/// Cross-module self-check with analytic predictors. Failures are reported
/// in the results, never thrown.
std::vector<CheckResult> oracle_check(const OracleCheckOptions& options);

/// Entry point of the `diffuse` tool. Returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace diffuse
