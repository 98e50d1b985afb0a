#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dqd2v {

using idx = std::int64_t;

// Config/contract violations (bad spec values, mismatched shapes in configs, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or inconsistent data fed to an operation.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Codebook usage collapsed below the perplexity threshold.
struct CollapseError : std::runtime_error {
    explicit CollapseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Loss became non-finite or exceeded the configured ceiling.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DataError(msg);
}

inline void require_config(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

// Non-fatal diagnostics (degenerate norms, skipped CTC utterances, ...).
// Counted so tests can assert a warning fired without scraping stderr.
void warn(const std::string& msg);
std::int64_t warn_count();
void reset_warn_count();
void set_warn_quiet(bool quiet);

}  // namespace dqd2v
