#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "grist/error.hpp"

namespace grist::rng {

/// 64-bit finalizer with full avalanche (splitmix64 constants).
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// FNV-1a over arbitrary bytes; used to fold strings into stream keys.
inline std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Counter-based generator: the i-th output is a pure function of (key, i).
/// Streams derived from distinct (seed, purpose, step) tuples are independent,
/// so parallel consumers cannot perturb each other's sequences.
struct CounterRng {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;

    std::uint64_t next_u64() { return mix64(key ^ mix64(counter++)); }

    /// Uniform double in [0, 1) with 53 bits of randomness.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform index in [0, n). Modulo reduction; the bias at 64 bits is
    /// far below anything observable at corpus scale.
    std::uint64_t next_below(std::uint64_t n) {
        require(n > 0, "next_below: n must be positive");
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call (no cached
    /// spare, so the stream position stays a pure function of call count).
    double next_gauss() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) {
            u1 = 0x1.0p-53;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    bool operator==(const CounterRng&) const = default;
};

/// Derive the stream for a given (master seed, purpose, step) tuple.
inline CounterRng stream_for(std::uint64_t master_seed, std::string_view purpose, std::uint64_t step = 0) {
    std::uint64_t key = hash_bytes(purpose, mix64(master_seed));
    key = mix64(key ^ mix64(step + 0x632be59bd9b4e019ull));
    return CounterRng{key, 0};
}

}  // namespace grist::rng
