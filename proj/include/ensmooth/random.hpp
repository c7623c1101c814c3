#pragma once

// Counter-based random streams. Every variate is a pure function of
// (key, counter), so draws are reproducible regardless of evaluation order
// or how work is split across threads.

#include <array>
#include <cstdint>

namespace ensmooth {

/// Philox4x32-10 block function (Salmon et al., "Parallel random numbers:
/// as easy as 1, 2, 3", SC'11).
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr Counter generate(Counter ctr, Key key) noexcept {
        for (int round = 0; round < 10; ++round) {
            ctr = single_round(ctr, key);
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static constexpr Counter single_round(const Counter& c, const Key& k) noexcept {
        const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
};

/// SplitMix64 finalizer; used to fold several 64-bit identifiers into one key.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Maps 52 random bits to the open interval (0, 1); never returns 0 or 1.
constexpr double bits_to_open_unit(std::uint64_t bits) noexcept {
    constexpr double kScale = 1.0 / 4503599627370496.0;  // 2^-52
    return (static_cast<double>(bits >> 12) + 0.5) * kScale;
}

/// A keyed family of uniform streams. `uniform_pair(a, b, c)` returns two
/// independent U(0,1) variates for the 128-bit counter (a, b, c).
class CounterStream {
public:
    constexpr explicit CounterStream(std::uint64_t key) noexcept
        : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)} {}

    constexpr CounterStream(std::uint64_t seed, std::uint64_t subkey) noexcept
        : CounterStream(mix64(mix64(seed) ^ subkey)) {}

    constexpr std::array<double, 2> uniform_pair(std::uint64_t index, std::uint32_t block,
                                                 std::uint32_t lane) const noexcept {
        const Philox4x32::Counter ctr{static_cast<std::uint32_t>(index),
                                      static_cast<std::uint32_t>(index >> 32), block, lane};
        const auto out = Philox4x32::generate(ctr, key_);
        const std::uint64_t a = (std::uint64_t{out[0]} << 32) | out[1];
        const std::uint64_t b = (std::uint64_t{out[2]} << 32) | out[3];
        return {bits_to_open_unit(a), bits_to_open_unit(b)};
    }

private:
    Philox4x32::Key key_;
};

}  // namespace ensmooth
