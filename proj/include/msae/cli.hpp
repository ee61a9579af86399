#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace msae::cli {

// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// Full command line including the program name. JSON results go to `out` (or a file
// named by the subcommand), human-readable progress and tables to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Arguments without the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Expands a k-list spec: "4,8,16" or "pow2:A.." (powers of two from A up to d, then d)
// or "pow2:A..B" (powers of two from A up to B).
std::vector<int> parse_k_list(const std::string& spec, int d);

} // namespace msae::cli
