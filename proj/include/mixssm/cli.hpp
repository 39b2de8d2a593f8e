#pragma once

#include <iosfwd>

namespace mixssm {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,      // usage, config, data, or checkpoint error
  kExitNumeric = 2,    // training aborted on a non-finite value
  kExitGradcheck = 3,  // a gradient check failed
};

/// Runs one invocation of the `mixssm` tool (argv[0] is the program name)
/// and returns its exit code. Normal output goes to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mixssm
