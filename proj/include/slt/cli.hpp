#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace slt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Entry point of the `slt` tool. `args[0]` is the program name. Returns 0 on
/// success, 1 on a usage or configuration error, 2 on a data, format or
/// numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace slt
