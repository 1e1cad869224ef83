#pragma once

// Running user-supplied helper tools (external encoders and detectors).

#include <string>
#include <vector>

namespace pimap::detail {

std::string shell_quote(const std::string& s);

// Runs `command` (a shell fragment, may carry its own arguments) followed by
// the quoted `args`. Returns the exit status; throws ExternalToolError when
// the process could not be started.
int run_command(const std::string& command, const std::vector<std::string>& args);

}  // namespace pimap::detail
