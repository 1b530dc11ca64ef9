// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace nvib {

// Deterministic random source. Every stochastic operation takes one of
// these explicitly; independent streams are derived with derive() so that
// results do not depend on thread scheduling.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    // Uniform on the open interval, clamped away from 0 and 1 so inverse-CDF
    // transforms stay finite.
    double uniform_open() {
        const double u = uniform();
        const double lo = 1e-12;
        return u < lo ? lo : (u > 1.0 - lo ? 1.0 - lo : u);
    }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

    std::uint64_t integer(std::uint64_t bound) {
        return std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::mt19937_64& engine() { return engine_; }

    // SplitMix64-style hash combining a base seed with stream coordinates.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        std::uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xBF58476D1CE4E5B9ULL);
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ULL;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace nvib
