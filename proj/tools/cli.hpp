// Command-line front end: pretrain, encode, decode, bench, generate, replay.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace udic::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr unsigned long long kDefaultSeed = 7;

/// Runs one command line without the program name and returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace udic::cli
