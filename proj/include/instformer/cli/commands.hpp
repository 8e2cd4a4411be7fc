#pragma once

#include <string>
#include <vector>

namespace instformer::cli {

// Entry point behind the instformer binary; args exclude the program name.
// Exit codes: 0 ok, 2 configuration/usage error, 3 numerical failure,
// 1 anything else.
int run(const std::vector<std::string>& args);

}  // namespace instformer::cli
