#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "chunkpd/common.hpp"
#include "chunkpd/nn.hpp"

namespace chunkpd {

enum class BackboneKind : std::uint8_t { ResidualCnn, PyramidTransformer };

std::string_view to_string(BackboneKind k);

/// Where a backbone's frozen weights come from: a converted weight file when
/// `weights_path` is set, otherwise a seeded He/truncated-normal initialisation.
struct BackboneSource {
  std::uint64_t seed = 0;
  std::filesystem::path weights_path;
};

/// Frozen feature trunk. Immutable after construction; `embed` is thread-safe.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual BackboneKind kind() const = 0;
  virtual int native_dim() const = 0;
  /// Pooled embedding of one image (3 channels, values in [0,1]).
  virtual std::vector<float> embed(const Image& image) const = 0;

  const std::string& variant() const noexcept { return variant_; }
  const BackboneSource& source() const noexcept { return source_; }
  const nn::ParamMap& params() const noexcept { return params_; }
  /// SHA-256 over parameter names, shapes and values.
  const std::string& digest() const noexcept { return digest_; }
  std::size_t parameter_count() const;

  /// Writes the weights in the parameter-file format accepted by BackboneSource::weights_path.
  void save_weights(const std::filesystem::path& path) const;

 protected:
  Backbone(std::string variant, BackboneSource source) : variant_(std::move(variant)), source_(std::move(source)) {}

  /// Declares a parameter; initialised by `init` unless loaded weights provide it.
  void declare(const std::string& name, std::vector<int> shape, const std::function<void(nn::Param&, std::uint64_t)>& init);
  /// Replaces declared parameters from the weight file, then computes the digest.
  void finalize();
  const float* p(const std::string& name) const;

 private:
  std::string variant_;
  BackboneSource source_;
  nn::ParamMap params_;
  std::string digest_;
};

/// ResNet variants: resnet10 (1,1,1,1), resnet18 (2,2,2,2), resnet34 (3,4,6,3) basic blocks;
/// always 64-128-256-512 channels and a 512-d pooled output.
/// PVT variants: pvt_tiny (2,2,2,2), pvt_small (3,4,6,3); widths 64-128-320-512, mean-pooled 512-d output.
/// Variant tags accepted by make_backbone for `kind`.
const std::vector<std::string>& backbone_variants(BackboneKind kind);

std::shared_ptr<const Backbone> make_backbone(BackboneKind kind, const std::string& variant,
                                              const BackboneSource& source = {});

/// Returns the same instance for repeated (kind, variant, source) requests within a process.
std::shared_ptr<const Backbone> shared_backbone(BackboneKind kind, const std::string& variant,
                                                const BackboneSource& source = {});

}  // namespace chunkpd
