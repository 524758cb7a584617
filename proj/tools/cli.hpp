#pragma once

#include <iosfwd>

namespace syncflow::cli {

// Exit codes: 0 ok, 1 usage, 2 config, 3 data/format, 4 numerical failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace syncflow::cli
