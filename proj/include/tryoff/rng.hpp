#pragma once

#include <cmath>
#include <cstdint>

#include "tryoff/common.hpp"

namespace tryoff {

// Deterministic generator with a single 64-bit word of state (splitmix64).
// Chosen over std::mt19937_64 + std::normal_distribution because the
// standard library leaves the normal transform unspecified; this one is
// bit-stable across compilers and trivially serializable into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    struct State {
        uint64_t state;
        uint8_t has_spare;
        double spare;
    };

    State save() const { return {state_, static_cast<uint8_t>(has_spare_ ? 1 : 0), spare_}; }
    void restore(const State& s) {
        state_ = s.state;
        has_spare_ = s.has_spare != 0;
        spare_ = s.spare;
    }

private:
    uint64_t state_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tryoff
