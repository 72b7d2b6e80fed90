#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace vmim {

// SplitMix64 finalizer; used to derive independent stream seeds from one run seed.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Portable seeded generator. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; all distributions below are implemented
// here rather than through <random> distributions, which differ between
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n);

    // Standard normal via Box-Muller (one draw per call, no cached spare).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal(0, stddev) resampled until it falls inside [-bound, bound].
    double truncated_normal(double stddev, double bound);

    // First k entries of a partial Fisher-Yates shuffle of 0..n-1.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace vmim
