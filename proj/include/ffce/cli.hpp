#pragma once

// Command-line surface: synth / train / infer / eval / gradcheck / report.
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <string>
#include <vector>

namespace ffce {

int cli_run(int argc, const char* const* argv);

// In-process convenience: args exclude the program name.
int cli_run(const std::vector<std::string>& args);

}  // namespace ffce
