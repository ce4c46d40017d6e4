#pragma once

#include <iosfwd>

namespace dcp {

// Entry point of the dcpbench tool. Returns 0 on success, 2 on a usage
// error and 1 when the command itself fails.
int run_cli(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err);

}  // namespace dcp
