#pragma once

#include <ostream>

namespace ncd::cli {

// Runs one command and returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace ncd::cli
