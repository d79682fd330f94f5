#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace osediff {

/// Runs one `osediff` subcommand. `args` excludes the program name.
/// Returns 0 on success, 1 on user or configuration errors (one-line
/// diagnostic), 2 on internal failures (message plus stack trace).
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, const char* const* argv);

}  // namespace osediff
