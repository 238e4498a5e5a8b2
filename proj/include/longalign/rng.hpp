#pragma once

// Portable, seed-stable random helpers. The standard distributions are
// implementation-defined, so anything that must reproduce bit-for-bit goes
// through these instead.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace longalign {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent child seed for stream `index` of `seed`.
inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
    return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t index(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace longalign
