#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace seqcond {

// Stream ids for the counter-based generator. Each subsystem draws from its
// own stream so adding draws in one place never shifts another's sequence.
enum class RngStream : std::uint64_t {
    kInit = 1,      // parameter initialization
    kData = 2,      // synthetic task batches
    kSample = 3,    // policy sampling in the RL stages
    kOracle = 4,    // random lattice prefixes
    kVerify = 5,    // random layer configs for equivalence/gradient suites
    kBench = 6,     // benchmark inputs
    kHeldOut = 7,   // evaluation problems
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based generator: the i-th draw is a pure function of
// (seed, stream, substream, i), so results do not depend on the platform's
// <random> distribution implementations.
class Rng {
public:
    Rng(std::uint64_t seed, RngStream stream, std::uint64_t substream = 0)
        : key_(splitmix64(splitmix64(seed) ^ splitmix64(static_cast<std::uint64_t>(stream) << 32 ^ substream))) {}

    std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }

    // Uniform in [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do x = next_u64(); while (x >= limit);
        return x % n;
    }

    int range(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do u1 = uniform(); while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace seqcond
