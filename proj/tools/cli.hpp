#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace metamer::cli {

// Exit codes: 0 success, 1 failure or partial batch failure, 2 usage or
// configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace metamer::cli
