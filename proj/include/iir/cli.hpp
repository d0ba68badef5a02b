#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 usage, configuration or unwritable-path error.

#include <iosfwd>
#include <string>
#include <vector>

namespace iir {

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace iir
