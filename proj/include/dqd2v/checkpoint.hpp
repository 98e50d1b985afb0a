#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dqd2v/backbone.hpp"
#include "dqd2v/config.hpp"

namespace dqd2v {

// Versioned binary container: config copy, step counter, named RNG states,
// every model parameter, and (optionally) optimizer moments keyed by
// parameter name. Round trips are bit-exact.
struct CheckpointMeta {
    RunConfig cfg;
    idx step = 0;
    std::vector<std::pair<std::string, std::string>> rng_states;
    bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const Model& model,
                     const nn::AdamW* opt, const std::vector<std::string>& opt_names,
                     idx step,
                     const std::vector<std::pair<std::string, std::string>>& rng_states);

// Reads config/step/rng only (enough to reconstruct the Model).
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Loads parameters (and optimizer state when requested) into an already
// constructed model. Parameter names and shapes must match exactly.
void load_checkpoint_state(const std::string& path, Model& model, nn::AdamW* opt,
                           const std::vector<std::string>& opt_names);

}  // namespace dqd2v
