// Copyright 2026 The MIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line entry point. Subcommands map onto library operations.

#ifndef MIM_CLI_HPP
#define MIM_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "mim/errors.hpp"

namespace mim {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

int exit_code(ErrorKind kind);

/// `args` excludes the program name. Results go to files or `out`,
/// diagnostics and the effective config to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mim

#endif  // MIM_CLI_HPP
