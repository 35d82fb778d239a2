#pragma once

#include <cmath>
#include <cstdint>

namespace tileq {

// Deterministic counter-based generator: every draw is a pure function of
// (seed, counter), so streams can be replayed or split without shared state.
// The mixer is the splitmix64 finalizer; Gaussians come from Box-Muller with
// the usual spare-value cache. All library randomness flows through this type
// so that "same inputs + same seed => bitwise-identical outputs" holds.

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    /// Next raw 64-bit draw.
    std::uint64_t next_u64() { return mix(seed_ + (++counter_) * GAMMA); }

    /// Uniform double in [0, 1), 53 mantissa bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (caches the second value of each pair).
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // 1 - u keeps the log argument in (0, 1].
        double u1 = 1.0 - next_unit();
        double u2 = next_unit();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double angle = 6.283185307179586476925286766559 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Uniform integer in [0, n). n must be nonzero. Uses 64-bit rejection-free
    /// multiply-shift; bias is negligible for the n used here (n << 2^32) but we
    /// still fold the full width through a 128-bit product for cleanliness.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Derive an independent stream key from a parent seed and a stream tag.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        return mix(seed ^ mix(stream + GAMMA));
    }

private:
    static constexpr std::uint64_t GAMMA = 0x9E3779B97F4A7C15ull;

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace tileq
