#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace cmotion {

// Counter-based PRNG built on splitmix64. Every consumer derives its own
// stream from (master seed, stage label, purpose label, index), so stages
// are reproducible in isolation and reordering one stage never perturbs
// another. Distributions are hand-rolled: std::<distribution>s are
// implementation-defined and would break bit-identical runs across
// standard libraries.
struct Prng {
    uint64_t state = 0x9e3779b97f4a7c15ull;

    static constexpr uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    explicit Prng(uint64_t seed = 0) : state(mix(seed ^ 0x6a09e667f3bcc908ull)) {}

    // Stream derivation: hash of stage + purpose strings folded into the
    // master seed, plus an integer counter for per-sample streams.
    static Prng stream(uint64_t master, std::string_view stage, std::string_view purpose = "", uint64_t index = 0) {
        uint64_t h = fnv1a(stage);
        h = fnv1a(purpose, h);
        h ^= mix(index + 0x2545f4914f6cdd1dull);
        return Prng(mix(master) ^ h);
    }

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, cached pair discarded for simplicity.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }
};

}  // namespace cmotion
