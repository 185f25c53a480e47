// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_RNG_HPP
#define SOEKIT_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace soekit {

/// Counter-based generator (Philox4x32-10).
///
/// A generator is fully described by (seed, stream). The seed is the Philox
/// key; the stream occupies the upper 64 bits of the 128-bit counter and the
/// lower 64 bits count blocks. Substreams are derived with
/// `substream(tag)`, which hashes (stream, tag) into a fresh stream id under
/// the same key, so e.g. data generation, weight init and noise draws can be
/// split off one master seed and replayed independently of each other.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  Rng substream(std::uint64_t tag) const { return Rng(seed_, mix(stream_ ^ mix(tag + 0x632be59bd9b4e019ULL))); }

  std::uint32_t next_u32() {
    if (lane_ == 4) {
      block_ = philox(counter_++);
      lane_ = 0;
    }
    return block_[lane_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::array<std::uint32_t, 4> philox(std::uint64_t block) const {
    std::array<std::uint32_t, 4> c{static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
                                   static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    std::uint32_t k0 = static_cast<std::uint32_t>(seed_);
    std::uint32_t k1 = static_cast<std::uint32_t>(seed_ >> 32);
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t{0xD2511F53} * c[0];
      const std::uint64_t p1 = std::uint64_t{0xCD9E8D57} * c[2];
      c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k0, static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k1, static_cast<std::uint32_t>(p0)};
      k0 += 0x9E3779B9;
      k1 += 0xBB67AE85;
    }
    return c;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int lane_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Well-known substream tags. Each consumer splits its own stream off the
/// master seed with one of these so reordering one consumer never perturbs
/// another.
namespace streams {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kBatch = 4;
inline constexpr std::uint64_t kLora = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kProbe = 7;
}  // namespace streams

}  // namespace soekit

#endif  // SOEKIT_RNG_HPP
