// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

#include "sisma/core/tensor.hpp"

namespace sisma {

/// Counter-free deterministic PRNG (splitmix64). One instance per logical
/// stream; derive independent streams with Rng::stream so draws never depend
/// on consumption order elsewhere. Identical seeds give identical sequences
/// on every platform.
class Rng {
public:
    explicit Rng(u64 seed) : s_(seed) {}

    /// Derive a stream keyed by (seed, path...): used for per-(step, sample)
    /// noise so training can resume mid-run without replaying draws.
    static Rng stream(u64 seed, std::initializer_list<u64> path) {
        u64 s = mix(seed ^ 0x9e3779b97f4a7c15ULL);
        for (u64 p : path) s = mix(s ^ mix(p + 0xbf58476d1ce4e5b9ULL));
        return Rng(s);
    }

    u64 next_u64() {
        s_ += 0x9e3779b97f4a7c15ULL;
        return mix(s_);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    i64 uniform_int(i64 lo, i64 hi_inclusive) {
        return lo + static_cast<i64>(next_u64() % static_cast<u64>(hi_inclusive - lo + 1));
    }

    /// Standard normal via Box-Muller; second draw of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean, double stddev) {
        for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(mean + stddev * normal());
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

private:
    static u64 mix(u64 z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    u64 s_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// FNV-1a over a byte string; used for config fingerprints.
inline u64 fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    u64 h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace sisma
