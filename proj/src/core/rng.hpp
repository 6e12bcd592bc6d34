// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace kvcat {

// Deterministic, platform-independent PRNG (splitmix64 core). std::mt19937
// is avoided for normal deviates because distribution implementations differ
// across standard libraries; everything here is pinned bit-for-bit.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (deterministic, no cached state so the
    // stream is insensitive to call grouping).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Exactly `count` distinct indices from [0, n), ascending.
    std::vector<int64_t> subset(int64_t n, int64_t count);

private:
    uint64_t state_;
};

// FNV-1a over a byte-ish name; used to derive per-component seeds from the
// single root seed so independent streams never collide.
uint64_t hash_name(std::string_view name);

inline uint64_t derive_seed(uint64_t root, std::string_view component) {
    return root ^ hash_name(component);
}

inline uint64_t derive_seed(uint64_t root, std::string_view component, uint64_t index) {
    return (root ^ hash_name(component)) + 0x9e3779b97f4a7c15ULL * (index + 1);
}

}  // namespace kvcat
