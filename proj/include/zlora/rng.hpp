// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace zlora {

/// Deterministic 64-bit PRNG (splitmix64). Every stochastic choice in the
/// library draws from one of these, seeded by an explicit 64-bit value, so
/// runs are reproducible bit-for-bit given a seed.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (two uniforms per pair, one cached).
    double gaussian() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_double();
        double u2 = next_double();
        // Guard u1 == 0 so log() stays finite.
        while (u1 <= 0.0) {
            u1 = next_double();
        }
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = radius * std::sin(theta);
        have_cached_ = true;
        return radius * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

private:
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

/// FNV-1a hash, used to derive named sub-streams from a base seed.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derive an independent stream seed from (base, tag). Per-language and
/// per-purpose streams are keyed by name, never by position, so permuting
/// a config's language list cannot change any per-language draw.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    SplitMix64 mix(base ^ fnv1a64(tag));
    return mix.next_u64();
}

} // namespace zlora
