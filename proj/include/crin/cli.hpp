#pragma once

// The `crin` command line: synth, train, eval, predict, analyze, gradcheck.

#include <iosfwd>
#include <string>
#include <vector>

namespace crin {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes: 0 success, 1 usage or configuration error (nothing written),
/// 2 runtime failure.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crin
