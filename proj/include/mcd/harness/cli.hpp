#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mcd::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitRuntime = 4;

// Runs one subcommand. args excludes the program name. Usage errors print
// help to `err`.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mcd::harness
