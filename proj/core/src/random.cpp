#include "chunkpd/random.hpp"

#include <cmath>
#include <numbers>

namespace chunkpd {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53;
constexpr std::uint32_t kMul1 = 0xCD9E8D57;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// 53-bit uniform in the open interval (0, 1).
inline double open_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

}  // namespace

Philox4x32::Counter Philox4x32::operator()(std::uint64_t counter_lo, std::uint64_t counter_hi) const {
  Counter ctr{static_cast<std::uint32_t>(counter_lo), static_cast<std::uint32_t>(counter_lo >> 32),
              static_cast<std::uint32_t>(counter_hi), static_cast<std::uint32_t>(counter_hi >> 32)};
  Key key = key_;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

double counter_normal(std::uint64_t key, std::uint64_t index) {
  const auto block = Philox4x32(key)(index / 2);
  const double u1 = open_unit(block[0], block[1]);
  const double u2 = open_unit(block[2], block[3]);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  return (index % 2 == 0) ? r * std::cos(theta) : r * std::sin(theta);
}

void fill_normal(std::uint64_t key, float sigma, std::span<float> out) {
  const Philox4x32 gen(key);
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const auto block = gen(i / 2);
    const double r = std::sqrt(-2.0 * std::log(open_unit(block[0], block[1])));
    const double theta = 2.0 * std::numbers::pi * open_unit(block[2], block[3]);
    out[i] = static_cast<float>(sigma * r * std::cos(theta));
    if (i + 1 < out.size()) out[i + 1] = static_cast<float>(sigma * r * std::sin(theta));
  }
}

std::uint32_t Rng::next_u32() {
  if (used_ == 4) {
    block_ = gen_(counter_++);
    used_ = 0;
  }
  return block_[static_cast<std::size_t>(used_++)];
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t hi = next_u32();
  return (hi << 32) | next_u32();
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const std::uint32_t a = next_u32(), b = next_u32(), c = next_u32(), d = next_u32();
  const double r = std::sqrt(-2.0 * std::log(open_unit(a, b)));
  const double theta = 2.0 * std::numbers::pi * open_unit(c, d);
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

}  // namespace chunkpd
