// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <map>
#include <ostream>
#include <string>
#include <string_view>

namespace dialectmix::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitInference = 3,
};

/// Flat key=value lines; '#' starts a comment line; surrounding blanks are
/// trimmed. Throws FormatError on a line without '=' or an empty key.
std::map<std::string, std::string> parse_config(std::string_view text);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dialectmix::cli
