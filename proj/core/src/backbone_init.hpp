#pragma once

#include <cstdint>

#include "chunkpd/nn.hpp"

namespace chunkpd::init {

/// Kaiming normal in fan-out mode for [out, in, k, k] kernels.
void he_normal_fan_out(nn::Param& p, std::uint64_t seed);
/// Normal(0, std) truncated at two standard deviations.
void trunc_normal(nn::Param& p, std::uint64_t seed, double std);
void fill(nn::Param& p, float value);

}  // namespace chunkpd::init
