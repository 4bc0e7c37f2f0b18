#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nmls::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kUsage = 2,     // bad flags or invalid input files
    kWarning = 3,   // finished, but e.g. training did not reach full accuracy
    kRuntime = 4,   // I/O, numeric or solver failure
};

/// Runs the command line; args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace nmls::cli
