#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace motok {

// splitmix64. Every random draw in the project goes through this so that
// streams are reproducible bit-for-bit across runs and platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0,1) with 53 random bits
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0,1) with 24 random bits, exactly representable in float
    float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Box-Muller; one value per call, two u64 draws consumed.
    float gauss() {
        double u1 = 1.0 - next_double(); // (0,1], keeps log finite
        double u2 = next_double();
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                  std::cos(6.283185307179586 * u2));
    }

    // [0,n), n >= 1
    int next_int(int n) { return static_cast<int>((next_u64() >> 33) % static_cast<uint64_t>(n)); }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

  private:
    uint64_t state_;
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    Rng r(a ^ (0x632BE59BD9B4E019ull + (b << 16) + (b >> 7)));
    return r.next_u64();
}

// FNV-1a
inline uint64_t hash_string(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t a, std::string_view tag) { return mix_seed(a, hash_string(tag)); }

} // namespace motok
