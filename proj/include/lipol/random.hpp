#pragma once

#include <cstdint>
#include <random>

namespace lipol {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; a stable 64-bit mixing function.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Per-recording seed: splitmix64(splitmix64(campaign_seed) ^ index).
/// Stable across platforms and independent of generation order.
constexpr std::uint64_t derive_seed(std::uint64_t campaign_seed, std::uint64_t index) {
    return splitmix64(splitmix64(campaign_seed) ^ index);
}

/// Counting noise with variance factor * mean. factor == 1 is Poisson; larger
/// factors draw from a gamma-Poisson mixture (negative binomial) with the
/// same mean.
inline double sample_counts(Rng& rng, double mean, double variance_factor) {
    if (mean <= 0) return 0.0;
    double lambda = mean;
    if (variance_factor > 1.0) {
        const double scale = variance_factor - 1.0;
        std::gamma_distribution<double> gamma(mean / scale, scale);
        lambda = gamma(rng);
        if (lambda <= 0) return 0.0;
    }
    std::poisson_distribution<long long> poisson(lambda);
    return static_cast<double>(poisson(rng));
}

} // namespace lipol
