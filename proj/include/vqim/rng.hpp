#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace vqim {

// xoshiro256** with splitmix64 seeding. Distributions are implemented here
// rather than with <random> because std::normal_distribution output is not
// specified by the standard; checkpoints require a bit-stable stream.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    // Multiply-shift; bias is negligible for n << 2^64 and the stream stays
    // portable across platforms.
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Box-Muller with cached spare.
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586477 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mu + sigma * r * std::cos(theta);
  }

  // State blob for checkpoints: 4 state words, spare flag, spare value.
  std::vector<uint8_t> serialize() const {
    std::vector<uint8_t> out(4 * 8 + 1 + 8);
    uint8_t* p = out.data();
    for (auto w : s_) {
      std::memcpy(p, &w, 8);
      p += 8;
    }
    *p++ = has_spare_ ? 1 : 0;
    std::memcpy(p, &spare_, 8);
    return out;
  }

  bool deserialize(const std::vector<uint8_t>& blob) {
    if (blob.size() != 4 * 8 + 1 + 8) return false;
    const uint8_t* p = blob.data();
    for (auto& w : s_) {
      std::memcpy(&w, p, 8);
      p += 8;
    }
    has_spare_ = (*p++ != 0);
    std::memcpy(&spare_, p, 8);
    return true;
  }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Stateless mix for per-index derived seeds (dataset generation).
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
    return splitmix64(x);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vqim
