#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cmix {

// Deterministic random source. std::mt19937_64 has a fully specified output
// sequence; the value mappings below are hand-rolled because the standard
// <random> distributions are implementation-defined and would break
// reproducibility across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform double in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi], inclusive. Uses fixed-point scaling, which
    // is deterministic and unbiased enough for corpus-scale spans.
    uint64_t uniform_int(uint64_t lo, uint64_t hi) {
        uint64_t span = hi - lo + 1;
        return lo + static_cast<uint64_t>(
                        (static_cast<unsigned __int128>(gen_()) * span) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller without pair caching; two draws per sample.
    double normal() {
        double u1;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Normal(0, stddev) rejected outside +/- clip.
    double truncated_normal(double stddev, double clip) {
        double v;
        do { v = normal() * stddev; } while (v < -clip || v > clip);
        return v;
    }

private:
    std::mt19937_64 gen_;
};

// Stable seed mixing for deriving per-epoch / per-stage streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace cmix
