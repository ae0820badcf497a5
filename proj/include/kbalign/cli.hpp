#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "kbalign/common.hpp"

namespace kbalign {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;

int exit_code(ErrorKind kind) noexcept;

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kbalign
