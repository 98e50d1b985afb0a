#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dqd2v/common.hpp"

namespace dqd2v {

// Seeded random stream. Distribution sampling is implemented by hand (not via
// std:: distributions) so that a fixed seed yields the same draw sequence on
// every standard library; mt19937_64 itself is fully specified.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Independent substream derived from (seed, stream id).
    static Rng substream(std::uint64_t seed, std::uint64_t stream) {
        return Rng(mix(mix(seed) ^ mix(stream ^ 0xa5a5a5a5deadbeefull)));
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased uniform integer in [0, n).
    idx uniform_int(idx n) {
        require(n > 0, "uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<idx>(x % un);
    }

    // Box-Muller; the second value of each pair is discarded to keep the
    // stream state equal to the plain generator state (simpler to persist).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // k distinct values from [0, n), in draw order (partial Fisher-Yates).
    std::vector<idx> sample_distinct(idx n, idx k);

    // Uniform permutation of [0, n).
    std::vector<idx> permutation(idx n);

    std::string save_state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        require(!is.fail(), "Rng::load_state: malformed state");
    }

private:
    std::mt19937_64 gen_;
};

inline std::vector<idx> Rng::permutation(idx n) {
    std::vector<idx> p(static_cast<std::size_t>(n));
    for (idx i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    for (idx i = n - 1; i > 0; --i) {
        idx j = uniform_int(i + 1);
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

inline std::vector<idx> Rng::sample_distinct(idx n, idx k) {
    require(k <= n, "sample_distinct: k > n");
    std::vector<idx> pool(static_cast<std::size_t>(n));
    for (idx i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    std::vector<idx> out;
    out.reserve(static_cast<std::size_t>(k));
    for (idx i = 0; i < k; ++i) {
        idx j = i + uniform_int(n - i);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
        out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace dqd2v
