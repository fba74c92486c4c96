#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tinylm::cli {

// Runs one command line (without the program name). Primary output goes to
// `out`; failures print a single `tinylm-error: <kind>: <message>` line to
// `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tinylm::cli
