#include "chunkpd/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "backbone_init.hpp"
#include "chunkpd/hashing.hpp"
#include "chunkpd/random.hpp"
#include "json.hpp"

namespace chunkpd {

std::unique_ptr<Backbone> make_resnet(const std::string& variant, const BackboneSource& source);
std::unique_ptr<Backbone> make_pvt(const std::string& variant, const BackboneSource& source);

std::string_view to_string(BackboneKind k) {
  return k == BackboneKind::ResidualCnn ? "residual_cnn" : "pyramid_transformer";
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.numel();
  return n;
}

void Backbone::declare(const std::string& name, std::vector<int> shape,
                       const std::function<void(nn::Param&, std::uint64_t)>& init) {
  nn::Param param;
  param.shape = std::move(shape);
  param.values.assign(param.numel(), 0.0f);
  if (source_.weights_path.empty()) init(param, derive_seed(source_.seed, variant_ + "/" + name));
  params_.emplace(name, std::move(param));
}

void Backbone::finalize() {
  if (!source_.weights_path.empty()) {
    auto loaded = nn::load_params(source_.weights_path);
    for (auto& [name, param] : params_) {
      auto it = loaded.find(name);
      if (it == loaded.end()) {
        throw Error(ErrorCode::FormatError, "weight file " + source_.weights_path.string() + " lacks " + name);
      }
      if (it->second.shape != param.shape) {
        throw Error(ErrorCode::DimensionMismatch, "weight " + name + " has the wrong shape");
      }
      param.values = std::move(it->second.values);
    }
  }
  Sha256 h;
  h.update(std::string(to_string(kind())) + "/" + variant_);
  for (const auto& [name, param] : params_) {
    h.update(name);
    for (int d : param.shape) h.update(std::to_string(d) + ",");
    h.update(std::span<const float>(param.values));
  }
  digest_ = to_hex(h.finish());
}

const float* Backbone::p(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error(ErrorCode::ModelNotLoaded, "missing backbone parameter " + name);
  return it->second.values.data();
}

void Backbone::save_weights(const std::filesystem::path& path) const {
  const nlohmann::json header = {{"format", "chunkpd-backbone"},
                                 {"version", 1},
                                 {"kind", to_string(kind())},
                                 {"variant", variant_},
                                 {"digest", digest_}};
  nn::save_params(params_, header.dump(), path);
}

const std::vector<std::string>& backbone_variants(BackboneKind kind) {
  static const std::vector<std::string> kResidual = {"resnet10", "resnet18", "resnet34"};
  static const std::vector<std::string> kPyramid = {"pvt_tiny", "pvt_small"};
  return kind == BackboneKind::ResidualCnn ? kResidual : kPyramid;
}

std::shared_ptr<const Backbone> make_backbone(BackboneKind kind, const std::string& variant,
                                              const BackboneSource& source) {
  if (kind == BackboneKind::ResidualCnn) return make_resnet(variant, source);
  return make_pvt(variant, source);
}

std::shared_ptr<const Backbone> shared_backbone(BackboneKind kind, const std::string& variant,
                                                const BackboneSource& source) {
  static std::mutex mutex;
  static std::map<std::string, std::weak_ptr<const Backbone>> registry;
  const auto key = std::string(to_string(kind)) + "|" + variant + "|" + std::to_string(source.seed) + "|" +
                   source.weights_path.string();
  std::lock_guard lock(mutex);
  if (auto existing = registry[key].lock()) return existing;
  auto created = make_backbone(kind, variant, source);
  registry[key] = created;
  return created;
}

// ---------------------------------------------------------------------------
// Initialisers shared by both trunks.

namespace init {

void he_normal_fan_out(nn::Param& p, std::uint64_t seed) {
  // shape [out, in, k, k]
  const double fan_out = static_cast<double>(p.shape[0]) * p.shape[2] * p.shape[3];
  const double std = std::sqrt(2.0 / fan_out);
  Rng rng(seed);
  for (auto& v : p.values) v = static_cast<float>(std * rng.normal());
}

void trunc_normal(nn::Param& p, std::uint64_t seed, double std) {
  Rng rng(seed);
  for (auto& v : p.values) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<float>(std * z);
  }
}

void fill(nn::Param& p, float value) { std::fill(p.values.begin(), p.values.end(), value); }

}  // namespace init

}  // namespace chunkpd
