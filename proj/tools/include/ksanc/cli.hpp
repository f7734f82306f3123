#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ksanc::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalid = 2,   // config, command line or input file problem
  kDiverged = 3,  // a loss became non-finite; the last epoch's state is kept
};

/// Runs one `ksanc` invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ksanc::cli
