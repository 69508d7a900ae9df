#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace mmt {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one invocation. `args` excludes the program name. Normal output goes
/// to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// <out>/<UTC timestamp>-seed<seed>, or `explicit_dir` when non-empty.
std::filesystem::path resolve_run_dir(const std::filesystem::path& out, const std::filesystem::path& explicit_dir,
                                      std::uint64_t seed);

}  // namespace mmt
