#pragma once

#include <array>
#include <cstdint>

namespace tinylm {

// xoshiro256** seeded through splitmix64. Only integer arithmetic is used to
// advance the state, so streams are identical on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept;

    // Independent stream for (seed, stream id) pairs, e.g. per trial or per window.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) noexcept;

    std::uint64_t next_u64() noexcept;
    // [0, 1) with 53 random bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    // Inclusive on both ends; unbiased.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept;
    // Box-Muller; the second variate is cached.
    double normal() noexcept;
    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }
    bool bernoulli(double p) noexcept { return uniform() < p; }

private:
    std::array<std::uint64_t, 4> s_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace tinylm
