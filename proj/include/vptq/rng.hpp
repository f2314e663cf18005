#pragma once

#include <cstdint>

namespace vptq {

// Splitmix64 stream. Tiny, seedable, and stable across platforms, which is
// all the quantizer needs: same seed, same draws, bit-identical codebooks.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next() {
        uint64_t z = (state += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return double(next() >> 11) * 0x1.0p-53; }

    // Uniform in [0, n).
    uint64_t next_below(uint64_t n) { return next() % n; }
};

// Decorrelates derived streams (per-codebook seeds etc.) from a base seed.
inline uint64_t mix_seed(uint64_t base, uint64_t salt) {
    Rng r(base ^ (salt * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
    return r.next();
}

}  // namespace vptq
