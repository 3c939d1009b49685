#pragma once

#include <cmath>
#include <cstdint>

namespace lsvcmm {

// splitmix64; used for seed mixing and to expand seeds into xoshiro state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent stream seed from a root seed and an index path,
/// e.g. derive_seed(root, replicate, attempt). Same inputs, same stream,
/// on every platform.
inline std::uint64_t derive_seed(std::uint64_t root) { return root; }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index, Rest... rest) {
    std::uint64_t s = root ^ (0x9e3779b97f4a7c15ULL + index);
    std::uint64_t mixed = splitmix64(s);
    return derive_seed(mixed, rest...);
}

/// xoshiro256++ with all integer state transitions; deterministic across
/// platforms for a given seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer on {0, ..., n-1} via rejection (unbiased).
    std::uint64_t uniform_index(std::uint64_t n) {
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t draw = next_u64();
        while (draw >= limit) draw = next_u64();
        return draw % n;
    }

    /// Standard normal via the Marsaglia polar method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double factor = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * factor;
        have_spare_ = true;
        return u * factor;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace lsvcmm
