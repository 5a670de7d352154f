#pragma once

#include <cmath>
#include <cstdint>

namespace unitlm {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Order-sensitive seed combiner for deriving per-example / per-stream seeds.
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    uint64_t s = a;
    uint64_t h = splitmix64(s);
    s = h ^ (b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
    return splitmix64(s);
}

// xoshiro256** seeded via splitmix64. Bit-reproducible on any platform;
// all distribution sampling is hand-rolled so no library variance leaks in.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) {
            w = splitmix64(sm);
        }
        has_gauss_ = false;
        gauss_spare_ = 0.0;
    }

    uint64_t u64() {
        const uint64_t result = rotl_(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) {
            return 0;
        }
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r = u64();
        while (r >= limit) {
            r = u64();
        }
        return r % n;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller with cached spare.
    double gauss() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        const double u = 1.0 - uniform01();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = two_pi * uniform01();
        gauss_spare_ = r * std::sin(theta);
        has_gauss_ = true;
        return r * std::cos(theta);
    }

    double gauss(double mu, double sigma) { return mu + sigma * gauss(); }

  private:
    static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4] = {};
    bool has_gauss_ = false;
    double gauss_spare_ = 0.0;
};

} // namespace unitlm
