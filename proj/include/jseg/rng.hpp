#pragma once

#include <cmath>
#include <cstdint>

#include "jseg/common.hpp"

namespace jseg {

// splitmix64; used only to expand seeds into xoshiro state.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d4a2c62d3c51ebull;
    return z ^ (z >> 31);
}

// xoshiro256++. Each voxel gets its own generator keyed by (seed, stream id),
// so simulation output does not depend on traversal order or thread count.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) {
        uint64_t sm = seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x52175ddf51a4bcbdull);
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double normal() {
        // Marsaglia polar method; cache the second variate.
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u, v, q;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            q = u * u + v * v;
        } while (q >= 1.0 || q == 0.0);
        double r = std::sqrt(-2.0 * std::log(q) / q);
        cache_ = v * r;
        has_cache_ = true;
        return u * r;
    }

    // Marsaglia-Tsang for shape >= 1; boost via U^(1/shape) below 1.
    double gamma(double shape) {
        if (!(shape > 0.0)) throw numeric_error("gamma sampler: shape must be positive");
        if (shape < 1.0) {
            double u = uniform();
            while (u == 0.0) u = uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        double x = gamma(a);
        double y = gamma(b);
        return x / (x + y);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double cache_ = 0.0;
    bool has_cache_ = false;
};

} // namespace jseg
