#pragma once

#include <iosfwd>

namespace boundless::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;

/// Environment variable that overrides the config's output directory.
/// `--out` takes precedence over it.
inline constexpr const char* kOutputEnv = "BOUNDLESS_OUT";

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace boundless::cli
