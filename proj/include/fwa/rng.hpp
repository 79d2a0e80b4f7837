#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fwa {

// Deterministic RNG. std::mt19937_64 output is pinned by the standard, but the
// std distributions are not, so uniform/normal sampling is done by hand to keep
// generated scenes bit-identical across toolchains.
class DetRng {
public:
    explicit DetRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), n >= 1. Modulo bias is irrelevant at the
    // ranges used here (n << 2^64).
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        const double u1 =
            (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace fwa
