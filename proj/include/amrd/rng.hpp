#pragma once

#include <cmath>
#include <cstdint>

namespace amrd {

// splitmix64 finalizer. Fully specified bit-for-bit, so every stream in the
// project is reproducible across platforms and serializes as two integers.
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

// Chain-hash a tag sequence into a derived seed. Used to split one global
// seed into independent purpose streams (data, augmentation, window
// sampling, parameter init).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0,
                            uint64_t c = 0) {
  uint64_t h = mix64(base ^ 0xA5A5A5A5DEADBEEFull);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

// Counter-based stream: state is (seed, counter), O(1) to checkpoint and
// resume exactly.
struct RngStream {
  uint64_t seed = 0;
  uint64_t counter = 0;

  RngStream() = default;
  explicit RngStream(uint64_t s) : seed(s) {}

  uint64_t next_u64() { return mix64(seed + 0x9E3779B97F4A7C15ull * ++counter); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  // Box-Muller, two fresh uniforms per draw (no cached second root: keeps
  // the draw count a pure function of the call count).
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }
};

}  // namespace amrd
