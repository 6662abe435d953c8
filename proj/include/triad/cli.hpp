#pragma once

// Command-line front end. Every command writes results to `out`; failures
// produce one `error: ...` line on `err` and a nonzero return.

#include <iosfwd>
#include <string>
#include <vector>

namespace triad {

/// args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace triad
