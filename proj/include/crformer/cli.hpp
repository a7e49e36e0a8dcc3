#pragma once

// Command-line surface shared by the crformer executable and its tests.

#include <ostream>
#include <string>
#include <vector>

namespace crformer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

/// Subcommands: gen-data, train, eval, ablate, gradcheck, export-masks.
/// Returns the process exit code; never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crformer
