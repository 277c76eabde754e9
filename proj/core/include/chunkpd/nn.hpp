#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "chunkpd/common.hpp"

namespace chunkpd::nn {

/// Single-image activation in C x H x W layout.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  float* channel(int c) noexcept { return data.data() + plane() * static_cast<std::size_t>(c); }
  const float* channel(int c) const noexcept { return data.data() + plane() * static_cast<std::size_t>(c); }
};

/// Token matrix: rows are tokens, columns are features (row-major).
struct Tokens {
  int count = 0;
  int dim = 0;
  std::vector<float> data;

  Tokens() = default;
  Tokens(int n, int d, float fill = 0.0f) : count(n), dim(d), data(static_cast<std::size_t>(n) * d, fill) {}
};

/// Named parameter with its shape; the unit of checkpoint serialization.
struct Param {
  std::vector<int> shape;
  std::vector<float> values;

  std::size_t numel() const;
};

using ParamMap = std::map<std::string, Param>;

/// Writes/reads a parameter file: a JSON header line then a CBOR body.
void save_params(const ParamMap& params, const std::string& header_json, const std::filesystem::path& path);
ParamMap load_params(const std::filesystem::path& path, std::string* header_json = nullptr);

/// HWC image in [0,1] to CHW with ImageNet mean/std standardisation.
Tensor to_tensor(const Image& image);

/// Convolution without bias, weights [out][in][k][k].
struct Conv2d {
  int in = 0, out = 0, kernel = 1, stride = 1, padding = 0;
  const float* weight = nullptr;
  const float* bias = nullptr;

  Tensor forward(const Tensor& x) const;
};

/// Inference batch-norm from (gamma, beta, running mean, running var).
void batch_norm(Tensor& x, const float* gamma, const float* beta, const float* mean, const float* var,
                float eps = 1e-5f);
void relu(Tensor& x);
void relu(Tokens& x);
void gelu(Tokens& x);
Tensor max_pool(const Tensor& x, int kernel, int stride, int padding);
std::vector<float> global_average_pool(const Tensor& x);

/// y = x W^T + b with W [out][in].
Tokens linear(const Tokens& x, const float* weight, const float* bias, int out);
void layer_norm(Tokens& x, const float* gamma, const float* beta, float eps = 1e-6f);

Tokens to_tokens(const Tensor& x);
Tensor to_tensor(const Tokens& x, int height, int width);

}  // namespace chunkpd::nn
