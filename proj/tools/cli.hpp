#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ucam::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumerical = 3;

/// Runs one verb (generate, train, eval, mc-sample, visualize). Returns the
/// process exit code; diagnostics go to `err`, summaries to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ucam::cli
