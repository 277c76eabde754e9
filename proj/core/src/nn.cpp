#include "chunkpd/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace chunkpd::nn {

namespace fs = std::filesystem;
using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

std::size_t Param::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

void save_params(const ParamMap& params, const std::string& header_json, const fs::path& path) {
  nlohmann::json body = nlohmann::json::object();
  for (const auto& [name, p] : params) {
    std::vector<std::uint8_t> bytes(p.values.size() * sizeof(float));
    std::memcpy(bytes.data(), p.values.data(), bytes.size());
    body[name] = {{"shape", p.shape}, {"data", nlohmann::json::binary(std::move(bytes))}};
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << header_json << '\n';
  const auto cbor = nlohmann::json::to_cbor(body);
  out.write(reinterpret_cast<const char*>(cbor.data()), static_cast<std::streamsize>(cbor.size()));
}

ParamMap load_params(const fs::path& path, std::string* header_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifact, "parameter file not found: " + path.string());
  std::string header;
  std::getline(in, header);
  if (header_json != nullptr) *header_json = header;
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json body;
  try {
    body = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, "corrupt parameter file " + path.string() + ": " + e.what());
  }
  ParamMap params;
  for (const auto& [name, entry] : body.items()) {
    Param p;
    p.shape = entry.at("shape").get<std::vector<int>>();
    const auto& bin = entry.at("data").get_binary();
    if (bin.size() != p.numel() * sizeof(float)) {
      throw Error(ErrorCode::FormatError, "parameter " + name + " has inconsistent size in " + path.string());
    }
    p.values.resize(p.numel());
    std::memcpy(p.values.data(), bin.data(), bin.size());
    params.emplace(name, std::move(p));
  }
  return params;
}

Tensor to_tensor(const Image& image) {
  static constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
  static constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};
  if (image.channels != 3) throw Error(ErrorCode::DimensionMismatch, "backbones expect 3-channel images");
  Tensor t(3, image.height, image.width);
  for (int c = 0; c < 3; ++c) {
    float* dst = t.channel(c);
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        dst[static_cast<std::size_t>(y) * image.width + x] = (image.at(y, x, c) - kMean[c]) / kStd[c];
      }
    }
  }
  return t;
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.channels != in) {
    throw Error(ErrorCode::DimensionMismatch,
                "conv expects " + std::to_string(in) + " channels, got " + std::to_string(x.channels));
  }
  const int oh = (x.height + 2 * padding - kernel) / stride + 1;
  const int ow = (x.width + 2 * padding - kernel) / stride + 1;
  const int rows = in * kernel * kernel;
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  Tensor y(out, oh, ow);

  const bool pointwise = kernel == 1 && stride == 1 && padding == 0;
  std::vector<float> col;
  const float* colp = x.data.data();
  if (!pointwise) {
    col.assign(static_cast<std::size_t>(rows) * cols, 0.0f);
    for (int c = 0; c < in; ++c) {
      const float* src = x.channel(c);
      for (int kh = 0; kh < kernel; ++kh) {
        for (int kw = 0; kw < kernel; ++kw) {
          float* dst = col.data() + static_cast<std::size_t>((c * kernel + kh) * kernel + kw) * cols;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - padding + kh;
            if (iy < 0 || iy >= x.height) continue;
            const float* srow = src + static_cast<std::size_t>(iy) * x.width;
            float* drow = dst + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - padding + kw;
              if (ix >= 0 && ix < x.width) drow[ox] = srow[ix];
            }
          }
        }
      }
    }
    colp = col.data();
  }
  MapConst w(weight, out, rows);
  MapConst cm(colp, rows, static_cast<Eigen::Index>(cols));
  Map ym(y.data.data(), out, static_cast<Eigen::Index>(cols));
  ym.noalias() = w * cm;
  if (bias != nullptr) {
    for (int o = 0; o < out; ++o) ym.row(o).array() += bias[o];
  }
  return y;
}

void batch_norm(Tensor& x, const float* gamma, const float* beta, const float* mean, const float* var, float eps) {
  for (int c = 0; c < x.channels; ++c) {
    const float scale = gamma[c] / std::sqrt(var[c] + eps);
    const float shift = beta[c] - mean[c] * scale;
    float* p = x.channel(c);
    for (std::size_t i = 0; i < x.plane(); ++i) p[i] = p[i] * scale + shift;
  }
}

void relu(Tensor& x) {
  for (auto& v : x.data) v = std::max(v, 0.0f);
}

void relu(Tokens& x) {
  for (auto& v : x.data) v = std::max(v, 0.0f);
}

void gelu(Tokens& x) {
  for (auto& v : x.data) v = 0.5f * v * (1.0f + std::erf(v * 0.70710678118654752f));
}

Tensor max_pool(const Tensor& x, int kernel, int stride, int padding) {
  const int oh = (x.height + 2 * padding - kernel) / stride + 1;
  const int ow = (x.width + 2 * padding - kernel) / stride + 1;
  Tensor y(x.channels, oh, ow);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.channel(c);
    float* dst = y.channel(c);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        for (int kh = 0; kh < kernel; ++kh) {
          const int iy = oy * stride - padding + kh;
          if (iy < 0 || iy >= x.height) continue;
          for (int kw = 0; kw < kernel; ++kw) {
            const int ix = ox * stride - padding + kw;
            if (ix < 0 || ix >= x.width) continue;
            best = std::max(best, src[static_cast<std::size_t>(iy) * x.width + ix]);
          }
        }
        dst[static_cast<std::size_t>(oy) * ow + ox] = best;
      }
    }
  }
  return y;
}

std::vector<float> global_average_pool(const Tensor& x) {
  std::vector<float> out(static_cast<std::size_t>(x.channels));
  for (int c = 0; c < x.channels; ++c) {
    double sum = 0.0;
    const float* p = x.channel(c);
    for (std::size_t i = 0; i < x.plane(); ++i) sum += p[i];
    out[static_cast<std::size_t>(c)] = static_cast<float>(sum / static_cast<double>(x.plane()));
  }
  return out;
}

Tokens linear(const Tokens& x, const float* weight, const float* bias, int out) {
  Tokens y(x.count, out);
  MapConst xm(x.data.data(), x.count, x.dim);
  MapConst w(weight, out, x.dim);
  Map ym(y.data.data(), x.count, out);
  ym.noalias() = xm * w.transpose();
  if (bias != nullptr) {
    Eigen::Map<const Eigen::RowVectorXf> b(bias, out);
    ym.rowwise() += b;
  }
  return y;
}

void layer_norm(Tokens& x, const float* gamma, const float* beta, float eps) {
  for (int n = 0; n < x.count; ++n) {
    float* row = x.data.data() + static_cast<std::size_t>(n) * x.dim;
    double mean = 0.0, sq = 0.0;
    for (int d = 0; d < x.dim; ++d) mean += row[d];
    mean /= x.dim;
    for (int d = 0; d < x.dim; ++d) sq += (row[d] - mean) * (row[d] - mean);
    const double inv = 1.0 / std::sqrt(sq / x.dim + eps);
    for (int d = 0; d < x.dim; ++d) {
      row[d] = static_cast<float>((row[d] - mean) * inv) * gamma[d] + beta[d];
    }
  }
}

Tokens to_tokens(const Tensor& x) {
  Tokens t(static_cast<int>(x.plane()), x.channels);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.channel(c);
    for (std::size_t i = 0; i < x.plane(); ++i) t.data[i * static_cast<std::size_t>(x.channels) + c] = src[i];
  }
  return t;
}

Tensor to_tensor(const Tokens& x, int height, int width) {
  if (x.count != height * width) throw Error(ErrorCode::DimensionMismatch, "token count does not match H x W");
  Tensor t(x.dim, height, width);
  for (int c = 0; c < x.dim; ++c) {
    float* dst = t.channel(c);
    for (std::size_t i = 0; i < t.plane(); ++i) dst[i] = x.data[i * static_cast<std::size_t>(x.dim) + c];
  }
  return t;
}

}  // namespace chunkpd::nn
