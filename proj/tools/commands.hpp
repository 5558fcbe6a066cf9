#pragma once

#include <string>
#include <vector>

namespace metapoison::cli {

enum ExitCode { kOk = 0, kUsage = 2, kInfeasible = 3, kInternal = 4 };

/// Runs one command line (args exclude the program name) and returns the
/// process exit code. Errors are reported on stderr.
int run(const std::vector<std::string>& args);

}  // namespace metapoison::cli
