#pragma once

#include <cstdint>
#include <vector>

namespace mstrnn {

/// Seeded pseudo-random generator. The algorithm is SplitMix64 and is frozen:
/// identical seeds produce identical streams on every platform, which is what
/// makes seeded runs reproducible bit for bit. Doubles are formed from the top
/// 53 bits, so no libm or distribution-object variability is involved.
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [0, n). Modulo reduction; the bias is below 2^-53
    /// for every n used in this codebase and the mapping is frozen.
    int next_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    /// Derives a decorrelated seed from (seed, tag) pairs, so per-subject or
    /// per-sample streams never overlap the parent stream.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
};

/// Fisher-Yates shuffle driven by SeededRng (std::shuffle is not
/// implementation-stable, this is).
template <typename T>
void seeded_shuffle(std::vector<T>& items, SeededRng& rng) {
    for (size_t i = items.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_int(static_cast<int>(i)));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace mstrnn
