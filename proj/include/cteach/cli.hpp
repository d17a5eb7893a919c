#pragma once

// Subcommands train, eval, pseudo and gradcheck.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cteach {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitCheckpoint = 3,
    kExitWrite = 4,
    kExitGradient = 5,
};

struct GradPath {
    std::string name;
    double max_rel_error = 0.0;
};

inline constexpr double kGradTolerance = 1e-4;

/// Finite-difference checks of every primitive and of the composite loss
/// paths, on small random instances drawn from `seed`.
std::vector<GradPath> gradient_suite(std::uint64_t seed);

/// Worker cap from CTEACH_THREADS (default 1).
std::size_t thread_cap();

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cteach
