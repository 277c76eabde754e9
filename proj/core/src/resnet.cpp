#include <array>
#include <map>

#include "backbone_init.hpp"
#include "chunkpd/backbone.hpp"

namespace chunkpd {

namespace {

constexpr std::array<int, 4> kWidths = {64, 128, 256, 512};

std::array<int, 4> stage_depths(const std::string& variant) {
  static const std::map<std::string, std::array<int, 4>> kVariants = {
      {"resnet10", {1, 1, 1, 1}}, {"resnet18", {2, 2, 2, 2}}, {"resnet34", {3, 4, 6, 3}}};
  const auto it = kVariants.find(variant);
  if (it == kVariants.end()) throw Error(ErrorCode::InvalidConfig, "unknown residual_cnn variant `" + variant + "`");
  return it->second;
}

/// Torchvision-compatible parameter naming so converted ImageNet weights load directly.
class ResNet final : public Backbone {
 public:
  ResNet(const std::string& variant, const BackboneSource& source)
      : Backbone(variant, source), depths_(stage_depths(variant)) {
    conv("conv1", 64, 3, 7);
    bn("bn1", 64);
    int in = 64;
    for (int s = 0; s < 4; ++s) {
      const int width = kWidths[static_cast<std::size_t>(s)];
      for (int b = 0; b < depths_[static_cast<std::size_t>(s)]; ++b) {
        const auto prefix = block_name(s, b);
        conv(prefix + ".conv1", width, b == 0 ? in : width, 3);
        bn(prefix + ".bn1", width);
        conv(prefix + ".conv2", width, width, 3);
        bn(prefix + ".bn2", width);
        if (b == 0 && (s > 0 || in != width)) {
          conv(prefix + ".downsample.0", width, in, 1);
          bn(prefix + ".downsample.1", width);
        }
      }
      in = width;
    }
    finalize();
  }

  BackboneKind kind() const override { return BackboneKind::ResidualCnn; }
  int native_dim() const override { return kWidths.back(); }

  std::vector<float> embed(const Image& image) const override {
    nn::Tensor x = nn::to_tensor(image);
    x = conv_op("conv1", 3, 64, 7, 2, 3).forward(x);
    apply_bn(x, "bn1");
    nn::relu(x);
    x = nn::max_pool(x, 3, 2, 1);
    int in = 64;
    for (int s = 0; s < 4; ++s) {
      const int width = kWidths[static_cast<std::size_t>(s)];
      for (int b = 0; b < depths_[static_cast<std::size_t>(s)]; ++b) {
        const auto prefix = block_name(s, b);
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        const int block_in = b == 0 ? in : width;
        nn::Tensor out = conv_op(prefix + ".conv1", block_in, width, 3, stride, 1).forward(x);
        apply_bn(out, prefix + ".bn1");
        nn::relu(out);
        out = conv_op(prefix + ".conv2", width, width, 3, 1, 1).forward(out);
        apply_bn(out, prefix + ".bn2");
        if (b == 0 && (s > 0 || in != width)) {
          nn::Tensor shortcut = conv_op(prefix + ".downsample.0", block_in, width, 1, stride, 0).forward(x);
          apply_bn(shortcut, prefix + ".downsample.1");
          for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += shortcut.data[i];
        } else {
          for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
        }
        nn::relu(out);
        x = std::move(out);
      }
      in = width;
    }
    return nn::global_average_pool(x);
  }

 private:
  static std::string block_name(int stage, int block) {
    return "layer" + std::to_string(stage + 1) + "." + std::to_string(block);
  }

  void conv(const std::string& name, int out, int in, int k) {
    declare(name + ".weight", {out, in, k, k}, init::he_normal_fan_out);
  }

  void bn(const std::string& name, int c) {
    declare(name + ".weight", {c}, [](nn::Param& p, std::uint64_t) { init::fill(p, 1.0f); });
    declare(name + ".bias", {c}, [](nn::Param& p, std::uint64_t) { init::fill(p, 0.0f); });
    declare(name + ".running_mean", {c}, [](nn::Param& p, std::uint64_t) { init::fill(p, 0.0f); });
    declare(name + ".running_var", {c}, [](nn::Param& p, std::uint64_t) { init::fill(p, 1.0f); });
  }

  nn::Conv2d conv_op(const std::string& name, int in, int out, int k, int stride, int pad) const {
    return nn::Conv2d{in, out, k, stride, pad, p(name + ".weight"), nullptr};
  }

  void apply_bn(nn::Tensor& x, const std::string& name) const {
    nn::batch_norm(x, p(name + ".weight"), p(name + ".bias"), p(name + ".running_mean"), p(name + ".running_var"));
  }

  std::array<int, 4> depths_;
};

}  // namespace

std::unique_ptr<Backbone> make_resnet(const std::string& variant, const BackboneSource& source) {
  return std::make_unique<ResNet>(variant, source);
}

}  // namespace chunkpd
