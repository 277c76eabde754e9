#include <Eigen/Core>
#include <array>
#include <cmath>
#include <map>

#include "backbone_init.hpp"
#include "chunkpd/backbone.hpp"

namespace chunkpd {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct StageShape {
  int dim;
  int heads;
  int mlp_ratio;
  int sr_ratio;
  int patch;
};

// Pyramid widths and spatial-reduction ratios of the tiny/small family.
constexpr std::array<StageShape, 4> kStages = {{{64, 1, 8, 8, 4}, {128, 2, 8, 4, 2}, {320, 5, 4, 2, 2},
                                                {512, 8, 4, 1, 2}}};
constexpr int kInputSide = 224;

std::array<int, 4> stage_depths(const std::string& variant) {
  static const std::map<std::string, std::array<int, 4>> kVariants = {{"pvt_tiny", {2, 2, 2, 2}},
                                                                      {"pvt_small", {3, 4, 6, 3}}};
  const auto it = kVariants.find(variant);
  if (it == kVariants.end()) {
    throw Error(ErrorCode::InvalidConfig, "unknown pyramid_transformer variant `" + variant + "`");
  }
  return it->second;
}

/// Pyramid vision transformer with spatial-reduction attention. The pooled
/// output is the token mean after the final norm.
class Pvt final : public Backbone {
 public:
  Pvt(const std::string& variant, const BackboneSource& source) : Backbone(variant, source), depths_(stage_depths(variant)) {
    int in = 3;
    int side = kInputSide;
    for (int s = 0; s < 4; ++s) {
      const auto& st = kStages[static_cast<std::size_t>(s)];
      const auto pre = "stage" + std::to_string(s + 1);
      side /= st.patch;
      declare(pre + ".patch_embed.proj.weight", {st.dim, in, st.patch, st.patch}, init::he_normal_fan_out);
      zeros(pre + ".patch_embed.proj.bias", {st.dim});
      norm(pre + ".patch_embed.norm", st.dim);
      declare(pre + ".pos_embed", {side * side, st.dim},
              [](nn::Param& p, std::uint64_t seed) { init::trunc_normal(p, seed, 0.02); });
      for (int b = 0; b < depths_[static_cast<std::size_t>(s)]; ++b) {
        const auto blk = pre + ".block" + std::to_string(b);
        norm(blk + ".norm1", st.dim);
        dense(blk + ".attn.q", st.dim, st.dim);
        dense(blk + ".attn.kv", 2 * st.dim, st.dim);
        dense(blk + ".attn.proj", st.dim, st.dim);
        if (st.sr_ratio > 1) {
          declare(blk + ".attn.sr.weight", {st.dim, st.dim, st.sr_ratio, st.sr_ratio}, init::he_normal_fan_out);
          zeros(blk + ".attn.sr.bias", {st.dim});
          norm(blk + ".attn.norm", st.dim);
        }
        norm(blk + ".norm2", st.dim);
        dense(blk + ".mlp.fc1", st.dim * st.mlp_ratio, st.dim);
        dense(blk + ".mlp.fc2", st.dim, st.dim * st.mlp_ratio);
      }
      in = st.dim;
    }
    norm("norm", kStages.back().dim);
    finalize();
  }

  BackboneKind kind() const override { return BackboneKind::PyramidTransformer; }
  int native_dim() const override { return kStages.back().dim; }

  std::vector<float> embed(const Image& image) const override {
    if (image.height != kInputSide || image.width != kInputSide) {
      throw Error(ErrorCode::DimensionMismatch, "pyramid_transformer expects 224x224 input");
    }
    nn::Tensor grid = nn::to_tensor(image);
    nn::Tokens x;
    int side = kInputSide;
    for (int s = 0; s < 4; ++s) {
      const auto& st = kStages[static_cast<std::size_t>(s)];
      const auto pre = "stage" + std::to_string(s + 1);
      side /= st.patch;
      grid = nn::Conv2d{grid.channels, st.dim, st.patch, st.patch, 0, p(pre + ".patch_embed.proj.weight"),
                        p(pre + ".patch_embed.proj.bias")}
                 .forward(grid);
      x = nn::to_tokens(grid);
      nn::layer_norm(x, p(pre + ".patch_embed.norm.weight"), p(pre + ".patch_embed.norm.bias"));
      const float* pos = p(pre + ".pos_embed");
      for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += pos[i];
      for (int b = 0; b < depths_[static_cast<std::size_t>(s)]; ++b) {
        block(x, pre + ".block" + std::to_string(b), st, side);
      }
      if (s < 3) grid = nn::to_tensor(x, side, side);
    }
    nn::layer_norm(x, p("norm.weight"), p("norm.bias"));
    std::vector<float> pooled(static_cast<std::size_t>(x.dim), 0.0f);
    for (int d = 0; d < x.dim; ++d) {
      double sum = 0.0;
      for (int n = 0; n < x.count; ++n) sum += x.data[static_cast<std::size_t>(n) * x.dim + d];
      pooled[static_cast<std::size_t>(d)] = static_cast<float>(sum / x.count);
    }
    return pooled;
  }

 private:
  void zeros(const std::string& name, std::vector<int> shape) {
    declare(name, std::move(shape), [](nn::Param& p, std::uint64_t) { init::fill(p, 0.0f); });
  }
  void norm(const std::string& name, int dim) {
    declare(name + ".weight", {dim}, [](nn::Param& p, std::uint64_t) { init::fill(p, 1.0f); });
    zeros(name + ".bias", {dim});
  }
  void dense(const std::string& name, int out, int in) {
    declare(name + ".weight", {out, in}, [](nn::Param& p, std::uint64_t seed) { init::trunc_normal(p, seed, 0.02); });
    zeros(name + ".bias", {out});
  }

  nn::Tokens apply(const nn::Tokens& x, const std::string& name, int out) const {
    return nn::linear(x, p(name + ".weight"), p(name + ".bias"), out);
  }

  void block(nn::Tokens& x, const std::string& blk, const StageShape& st, int side) const {
    const int dim = st.dim;
    nn::Tokens h = x;
    nn::layer_norm(h, p(blk + ".norm1.weight"), p(blk + ".norm1.bias"));

    const nn::Tokens q = apply(h, blk + ".attn.q", dim);
    nn::Tokens ctx = h;
    if (st.sr_ratio > 1) {
      const nn::Tensor reduced =
          nn::Conv2d{dim, dim, st.sr_ratio, st.sr_ratio, 0, p(blk + ".attn.sr.weight"), p(blk + ".attn.sr.bias")}
              .forward(nn::to_tensor(h, side, side));
      ctx = nn::to_tokens(reduced);
      nn::layer_norm(ctx, p(blk + ".attn.norm.weight"), p(blk + ".attn.norm.bias"));
    }
    const nn::Tokens kv = apply(ctx, blk + ".attn.kv", 2 * dim);

    const int head_dim = dim / st.heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    nn::Tokens attended(x.count, dim);
    Eigen::Map<const RowMajor> qm(q.data.data(), q.count, dim);
    Eigen::Map<const RowMajor> kvm(kv.data.data(), kv.count, 2 * dim);
    Eigen::Map<RowMajor> om(attended.data.data(), x.count, dim);
    for (int head = 0; head < st.heads; ++head) {
      const int off = head * head_dim;
      RowMajor scores = (qm.middleCols(off, head_dim) * kvm.middleCols(off, head_dim).transpose()) * scale;
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        auto row = scores.row(r);
        const float mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
      }
      om.middleCols(off, head_dim).noalias() = scores * kvm.middleCols(dim + off, head_dim);
    }
    const nn::Tokens projected = apply(attended, blk + ".attn.proj", dim);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += projected.data[i];

    h = x;
    nn::layer_norm(h, p(blk + ".norm2.weight"), p(blk + ".norm2.bias"));
    nn::Tokens hidden = apply(h, blk + ".mlp.fc1", dim * st.mlp_ratio);
    nn::gelu(hidden);
    const nn::Tokens mlp = apply(hidden, blk + ".mlp.fc2", dim);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += mlp.data[i];
  }

  std::array<int, 4> depths_;
};

}  // namespace

std::unique_ptr<Backbone> make_pvt(const std::string& variant, const BackboneSource& source) {
  return std::make_unique<Pvt>(variant, source);
}

}  // namespace chunkpd
