#pragma once

// Command-line front end: generate, train, eval, audit-equivariance,
// gradcheck and bench.

#include <iosfwd>

namespace mvgnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitCheckFailed = 2;

// Parses argv and runs one subcommand. Results go to `out` (one JSON object
// per line with --json), the resolved configuration and diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mvgnn::cli
