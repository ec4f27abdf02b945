#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace bittrace {

/// Seeded generator with pinned value mappings.  std::mt19937_64 has a
/// standard-mandated sequence, but the standard distributions do not; the
/// mappings here are spelled out so identical seeds give identical streams
/// on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double unit() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    /// Uniform integer in [0, n).  Multiply-shift mapping; n must be > 0.
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(
            (static_cast<unsigned __int128>(engine_()) *
             static_cast<unsigned __int128>(n)) >>
            64);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(static_cast<std::int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace bittrace
