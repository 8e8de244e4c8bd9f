#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mmcan {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Deterministic random source. All draws go through hand-rolled conversions
// so that streams are reproducible across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Independent substream derived from (seed, stream_id).
    static Rng for_stream(std::uint64_t seed, std::uint64_t stream_id) {
        return Rng(splitmix64(splitmix64(seed) ^ (stream_id + 0x632BE59BD9B4E019ULL)));
    }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; draws two uniforms per call.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    bool bernoulli(double prob) { return uniform() < prob; }

    // [0, n), unbiased
    std::size_t uniform_index(std::size_t n) {
        const std::uint64_t max_u64 = ~std::uint64_t{0};
        const std::uint64_t bound = max_u64 - max_u64 % n;
        std::uint64_t r = next_u64();
        while (r >= bound) r = next_u64();
        return static_cast<std::size_t>(r % n);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mmcan
