#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace chunkpd {

using Digest = std::array<std::uint8_t, 32>;

/// Incremental SHA-256 (OpenSSL EVP backed).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  Sha256(Sha256&&) noexcept;
  Sha256& operator=(Sha256&&) noexcept;

  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update(std::string_view text);
  Sha256& update(std::span<const float> values);
  Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Digest sha256(std::string_view text);
std::string to_hex(const Digest& d);
std::string sha256_hex(std::string_view text);

/// First eight digest bytes read big-endian.
std::uint64_t leading_u64(const Digest& d);

/// Combines an integer seed with a textual stream name into a 64-bit key.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace chunkpd
