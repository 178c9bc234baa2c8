#pragma once

#include <cmath>
#include <cstdint>

namespace sttpp {

// Counter-free splitmix64 generator. The algorithm is fixed and documented
// (Steele et al.) so streams are reproducible across machines; distribution
// transforms below are hand-rolled for the same reason.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Exponential with the given rate; uses -log1p(-u) so u = 0 is safe.
    double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

    // Box-Muller, no cached spare (keeps the stream position predictable).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // guard u1 = 0
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n) by rejection (n > 0).
    int uniform_int(int n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    std::uint64_t state_;
};

}  // namespace sttpp
