#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace phonelm {

// splitmix64 finalizer; also used to derive stream seeds.
inline uint64_t mix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// Derives an independent stream seed from a base seed and up to three
// stream tags. Used so that records, epochs and batches each get their
// own reproducible generator irrespective of processing order.
inline uint64_t derive_seed(uint64_t base, uint64_t s0, uint64_t s1 = 0,
                            uint64_t s2 = 0) {
  uint64_t x = base;
  x = mix64(x + 0x9e3779b97f4a7c15ULL + s0);
  x = mix64(x + 0x9e3779b97f4a7c15ULL + s1);
  x = mix64(x + 0x9e3779b97f4a7c15ULL + s2);
  return x;
}

// Stream tags for derive_seed. Values are part of the reproducibility
// contract: changing them changes every seeded artifact.
namespace seed_stream {
inline constexpr uint64_t kInit = 1;       // weight initialization
inline constexpr uint64_t kOrder = 2;      // epoch shuffling
inline constexpr uint64_t kMask = 3;       // MLM masking
inline constexpr uint64_t kDropout = 4;    // dropout masks
inline constexpr uint64_t kValSplit = 5;   // validation split
inline constexpr uint64_t kWordNoise = 6;  // word channel, per record
inline constexpr uint64_t kPhonNoise = 7;  // phoneme channel, per record
inline constexpr uint64_t kLevel = 8;      // noise-level mixing, per record
inline constexpr uint64_t kHead = 9;       // classifier head init
}  // namespace seed_stream

// xoshiro256** with splitmix64 seeding. Small serializable state, no
// hidden members: every draw is a pure function of the four state words,
// which keeps checkpointed runs bit-reproducible.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) {
      s += 0x9e3779b97f4a7c15ULL;
      w = mix64(s);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1) with 53 bits of precision.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [0,n). Fixed-width multiply-high: always consumes exactly
  // one draw, which keeps parallel trace oracles simple.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  size_t next_index(size_t n) { return static_cast<size_t>(next_below(n)); }

  // Box-Muller without a cached spare.
  double next_normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = next_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::array<uint64_t, 4> state_{};
};

}  // namespace phonelm
