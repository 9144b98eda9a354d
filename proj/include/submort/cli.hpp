#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace submort::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;  // runtime or data failure
inline constexpr int kUsage = 2;    // bad arguments

/// Runs the command line `args` (args[0] is the program name). Messages go to
/// `out` and `err`; nothing is written to the process streams directly.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Same, using std::cout and std::cerr.
int run(int argc, char** argv);

}  // namespace submort::cli
