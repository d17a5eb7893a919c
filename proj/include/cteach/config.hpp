#pragma once

// Run configuration: a JSON document covering the synthetic world, model,
// losses, optimiser and the train/eval/pseudo subcommands.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "cteach/training.hpp"

namespace cteach {

struct EvalConfig {
    std::size_t scene_count = 32;
};

struct PseudoConfig {
    std::size_t scene_count = 4;
    bool all_ignore = false;
};

struct RunConfig {
    WorldConfig world;
    TrainConfig train;
    EvalConfig eval;
    PseudoConfig pseudo;
    std::size_t checkpoint_every = 250;
    std::string out_dir;

    /// Fills derived fields (segmenter in/out widths) and validates.
    void resolve();
};

/// Parses a JSON document over the defaults. Unknown keys and ill-typed
/// values throw ConfigError naming the key path.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully materialized, pretty-printed JSON.
std::string run_config_to_json(const RunConfig& config);

/// FNV-1a over the settings that shape a checkpoint (everything except the
/// iteration budget, checkpoint cadence, eval, pseudo and output settings).
std::uint64_t config_hash(const RunConfig& config);

/// Version string written into run manifests.
std::string_view code_version();

}  // namespace cteach
