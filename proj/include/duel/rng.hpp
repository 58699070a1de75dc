#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace duel {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// Every draw is a pure function of (key, counter), so a stream keyed by
// (run seed, stream id, step) produces identical values no matter how work
// is scheduled across threads or platforms. This is what makes corpus-level
// evaluation reports byte-identical under --parallel.
namespace philox {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

using Block = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

inline Block round(Block c, Key k) {
  const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
  const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const auto lo0 = static_cast<std::uint32_t>(p0);
  const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const auto lo1 = static_cast<std::uint32_t>(p1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

inline Block block(std::uint64_t key, std::uint64_t ctr_hi, std::uint64_t ctr_lo) {
  Key k{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  Block c{static_cast<std::uint32_t>(ctr_lo), static_cast<std::uint32_t>(ctr_lo >> 32),
          static_cast<std::uint32_t>(ctr_hi), static_cast<std::uint32_t>(ctr_hi >> 32)};
  for (int r = 0; r < 10; ++r) {
    c = round(c, k);
    k[0] += kWeyl0;
    k[1] += kWeyl1;
  }
  return c;
}

inline std::uint64_t bits64(std::uint64_t key, std::uint64_t ctr_hi, std::uint64_t ctr_lo) {
  const Block b = block(key, ctr_hi, ctr_lo);
  return (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
}

}  // namespace philox

/// Derives an independent 64-bit seed from (seed, a, b); used to hand each
/// training step or Monte Carlo draw its own reproducible sub-seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return philox::bits64(seed, a, b);
}

/// A stateful view over the Philox counter space for one (seed, stream, step).
/// Draws are consumed in index order; the i-th draw of a given stream is the
/// same in every run.
class PhiloxStream {
 public:
  PhiloxStream(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t step = 0)
      : key_(seed), hi_((stream << 20) ^ step), index_(0) {}

  /// Uniform double in [0, 1), 53 random bits.
  double next_uniform() {
    const std::uint64_t bits = philox::bits64(key_, hi_, index_++);
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n); n >= 1.
  std::uint32_t next_below(std::uint32_t n) {
    const std::uint64_t bits = philox::bits64(key_, hi_, index_++);
    return static_cast<std::uint32_t>(bits % n);
  }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double next_normal() {
    const double u1 = (static_cast<double>(philox::bits64(key_, hi_, index_++) >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t hi_;
  std::uint64_t index_;
};

}  // namespace duel
