#pragma once

#include <ostream>

namespace redwatch::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitViolations = 1;
inline constexpr int kExitBadFlags = 2;
inline constexpr int kExitMalformedTrace = 3;
inline constexpr int kExitInternal = 4;

/// Runs one command line. Never reads the environment.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace redwatch::cli
