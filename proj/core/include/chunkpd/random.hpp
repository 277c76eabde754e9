#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace chunkpd {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
/// Output depends only on (key, counter), never on call history.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  explicit Philox4x32(std::uint64_t key)
      : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)} {}

  Counter operator()(std::uint64_t counter_lo, std::uint64_t counter_hi = 0) const;

 private:
  Key key_;
};

/// Standard normal value number `index` of the stream keyed by `key`.
/// Box-Muller over one Philox block; pairs share a block.
double counter_normal(std::uint64_t key, std::uint64_t index);

/// Fills `out` with counter_normal(key, 0..n-1) scaled by sigma.
void fill_normal(std::uint64_t key, float sigma, std::span<float> out);

/// Sequential generator over a Philox stream, used for shuffles and weight init.
/// Distribution code is local so results do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

 private:
  Philox4x32 gen_;
  std::uint64_t counter_ = 0;
  Philox4x32::Counter block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace chunkpd
