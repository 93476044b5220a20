// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli is the whole program minus main(), so the
// tests can drive it in-process.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace maskgru::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kCheckFailed = 3 };

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace maskgru::cli
