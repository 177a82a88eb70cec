#pragma once

#include <ostream>

namespace a3 {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Entry point of the `a3` tool. Exit codes: 0 ok, 2 usage/config/IO error,
/// 3 numeric abort, 1 anything else.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace a3
