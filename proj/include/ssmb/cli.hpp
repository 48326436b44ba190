// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: gen-data, pretrain, train, eval, routes.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ssmb {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssmb
