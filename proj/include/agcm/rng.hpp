#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace agcm {

// SplitMix64 finalizer. Used both as the output function of the counter
// generator and to derive independent stream keys.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives a stream key from a seed and a sequence of stream identifiers.
/// Each identifier is folded in with mix64 so (seed, a, b) and (seed, b, a)
/// yield unrelated keys.
template <typename... Ids>
constexpr std::uint64_t stream_key(std::uint64_t seed, Ids... ids) noexcept
{
    std::uint64_t key = mix64(seed + 0x6a09e667f3bcc909ULL);
    ((key = mix64(key ^ mix64(static_cast<std::uint64_t>(ids) + 0x9e3779b97f4a7c15ULL))), ...);
    return key;
}

/// Counter-based generator: the i-th output is mix64(key + i * golden).
///
/// The stream is fully described by (key, counter), so any implementation
/// that reproduces SplitMix64's finalizer reproduces every draw. Uniform
/// doubles take the top 53 bits; normals use Box-Muller with the cosine
/// branch only (one normal per two uniforms) to keep the call count fixed.
class CounterRng {
public:
    explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

    constexpr std::uint64_t next_u64() noexcept
    {
        ++counter_;
        return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform in [0, 1).
    constexpr double uniform() noexcept
    {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Uses 128-bit multiply-shift, so the bias is
    /// below 2^-64 * n and irrelevant at the sizes used here.
    std::uint64_t below(std::uint64_t n) noexcept
    {
        const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
        return static_cast<std::uint64_t>(wide >> 64);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    double normal() noexcept
    {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    constexpr std::uint64_t key() const noexcept { return key_; }
    constexpr std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Fisher-Yates with CounterRng, so permutations are portable.
template <typename Container>
void shuffle(Container& items, CounterRng& rng)
{
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        using std::swap;
        swap(items[i - 1], items[j]);
    }
}

} // namespace agcm
