#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace eccdet::cli {

// Exit codes: 0 success, 1 runtime failure (one "ERROR <code> <message>" line
// on err), 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eccdet::cli
