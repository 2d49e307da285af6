#pragma once

// Finite-difference suites over the op set and a small end-to-end model,
// shared by the unit tests, the `gradcheck` subcommand and the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

#include "crin/autograd.hpp"
#include "crin/config.hpp"

namespace crin {

struct GradCheckCase {
  std::string name;
  GradientReport report;
  double tolerance = 0;
  bool passed() const { return report.max_rel_err() <= tolerance; }
};

inline constexpr double kOpGradTolerance = 1e-5;
inline constexpr double kModelGradTolerance = 1e-3;

/// One 64-bit check per differentiable op, each contracted against a fixed
/// random tensor so every output coordinate carries a distinct weight.
std::vector<GradCheckCase> op_gradcheck_suite(std::uint64_t seed = 100);

/// full_crin on a random 1x3xSxS image with random masks, composite loss,
/// f64, eps 1e-5, `coords_per_param` coordinates per parameter tensor.
GradCheckCase model_gradcheck(const CrinConfig& config, std::int64_t size = 32, std::uint64_t seed = 3,
                              std::int64_t coords_per_param = 3);

/// Name, tolerance, max error and verdict per case, then the per-parameter
/// report of every failing case.
std::string gradcheck_summary(const std::vector<GradCheckCase>& cases);

}  // namespace crin
