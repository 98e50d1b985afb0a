#pragma once

#include <string>

#include "dqd2v/config.hpp"

namespace dqd2v::cli {

// Exit codes (distinct so expected failure modes can be asserted).
inline constexpr int kOk = 0;
inline constexpr int kUsageError = 1;
inline constexpr int kConfigError = 2;
inline constexpr int kCollapse = 3;
inline constexpr int kDivergence = 4;

// Table-style ablation presets S1..S7 applied on top of a base config.
// S1 Gumbel softmax PQT / S2 group=1 / S3 L2 norm in PQT / S4 instance norm
// in LQT / S5 extra transformer / S6 extra CNN / S7 deep without conv block.
void apply_ablation(RunConfig& cfg, const std::string& id);

int run(int argc, const char* const* argv);

}  // namespace dqd2v::cli
