#pragma once

// Counter-based random streams.
//
// Philox4x32-10 (Salmon et al., SC'11) keyed by a hash of (seed, purpose tag).
// The 128-bit counter is laid out as
//   word 0      draw block within the step
//   word 1      step index
//   words 2..3  chain index
// so every (seed, purpose, chain, step) addresses an independent stream and
// results do not depend on the order in which chains are evaluated.

#include "ddram/core.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace ddram {

class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter generate(Counter ctr, Key key) noexcept {
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

    static Counter single_round(const Counter& c, const Key& k) noexcept {
        const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Step index reserved for the initial draw of a chain.
inline constexpr std::uint32_t kInitialStep = 0xFFFFFFFFu;

/// A sequential view onto one Philox stream. Cheap to construct; copyable.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::string_view purpose, std::uint64_t chain = 0,
                 std::uint32_t step = 0) noexcept {
        const std::uint64_t k = splitmix64(seed ^ splitmix64(fnv1a64(purpose)));
        key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
        ctr_ = {0u, step, static_cast<std::uint32_t>(chain), static_cast<std::uint32_t>(chain >> 32)};
    }

    std::uint32_t next_u32() noexcept {
        if (pos_ == 4) {
            block_ = Philox4x32::generate(ctr_, key_);
            ++ctr_[0];
            pos_ = 0;
        }
        return block_[pos_++];
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept {
        const std::uint64_t hi = next_u32() >> 5;  // 27 bits
        const std::uint64_t lo = next_u32() >> 6;  // 26 bits
        return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
    }

    /// Standard normal by Box-Muller; the second variate of each pair is cached.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Vector normal_vector(Eigen::Index d) {
        Vector z(d);
        for (Eigen::Index i = 0; i < d; ++i) z[i] = normal();
        return z;
    }

    void fill_normal(Vector& z) noexcept {
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal();
    }

private:
    Philox4x32::Key key_{};
    Philox4x32::Counter ctr_{};
    Philox4x32::Counter block_{};
    int pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ddram
