#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace famp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name. `env_out` stands in for FAMP_OUT_DIR.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const std::string& env_out = {});

}  // namespace famp::cli
