#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace voltctrl::cli {

// Exit codes.
constexpr int kOk = 0;
constexpr int kSolverAbort = 2;
constexpr int kInputError = 3;

// Entry point of the `voltctrl` tool: `run`, `sweep` and `report`
// subcommands. Diagnostics go to `err`, help text to `out`.
int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace voltctrl::cli
