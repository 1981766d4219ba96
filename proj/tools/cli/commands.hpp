#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tidmad::cli {

// Runs the `tidmad` command line.  Returns the process exit code:
// 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace tidmad::cli
