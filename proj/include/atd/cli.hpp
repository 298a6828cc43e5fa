#pragma once

#include <iosfwd>

namespace atd {

/// Entry point of the `atd` command line tool; returns the process exit code.
/// Diagnostics go to `err`, results to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace atd
