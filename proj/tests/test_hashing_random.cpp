#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "chunkpd/hashing.hpp"
#include "chunkpd/random.hpp"

using namespace chunkpd;

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Sha256, IncrementalMatchesOneShot) {
  Sha256 h;
  h.update(std::string_view("ab")).update(std::string_view("c"));
  EXPECT_EQ(to_hex(h.finish()), sha256_hex("abc"));
}

TEST(Sha256, LeadingBytesAreBigEndian) {
  Digest d{};
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<std::uint8_t>(i + 1);
  EXPECT_EQ(leading_u64(d), 0x0102030405060708ULL);
}

TEST(DeriveSeed, StreamsAreDistinctAndStable) {
  EXPECT_EQ(derive_seed(3, "fold/0"), derive_seed(3, "fold/0"));
  EXPECT_NE(derive_seed(3, "fold/0"), derive_seed(3, "fold/1"));
  EXPECT_NE(derive_seed(3, "fold/0"), derive_seed(4, "fold/0"));
}

// Known-answer vectors of the reference Philox4x32-10 implementation.
TEST(Philox, KnownAnswers) {
  const auto zero = Philox4x32(0)(0, 0);
  EXPECT_EQ(zero, (Philox4x32::Counter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));

  const auto ones = Philox4x32(~0ULL)(~0ULL, ~0ULL);
  EXPECT_EQ(ones, (Philox4x32::Counter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));

  const auto pi = Philox4x32(0x299f31d0a4093822ULL)(0x85a308d3243f6a88ULL, 0x0370734413198a2eULL);
  EXPECT_EQ(pi, (Philox4x32::Counter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(CounterNormal, FillAgreesWithPointwise) {
  std::vector<float> buf(33);
  fill_normal(42, 0.5f, buf);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    EXPECT_FLOAT_EQ(buf[i], static_cast<float>(0.5 * counter_normal(42, i))) << i;
  }
}

TEST(CounterNormal, Moments) {
  const std::size_t n = 200000;
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = counter_normal(9, i);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.015);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(5), b(5), c(6);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(1);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++hist[r.below(7)];
  }
  for (int h : hist) EXPECT_NEAR(h, 10000, 400);
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  Rng r(11);
  r.shuffle(v);
  EXPECT_EQ(std::set<int>(v.begin(), v.end()).size(), 50u);
  std::vector<int> w(50);
  std::iota(w.begin(), w.end(), 0);
  Rng r2(11);
  r2.shuffle(w);
  EXPECT_EQ(v, w);
}
