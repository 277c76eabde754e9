#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkpd/backbone.hpp"
#include "chunkpd/common.hpp"
#include "chunkpd/hashing.hpp"
#include "chunkpd/preprocess.hpp"

namespace chunkpd {

enum class EncoderKind : std::uint8_t { ResidualCnn, PyramidTransformer, HybridConcat };

std::string_view to_string(EncoderKind k);
std::optional<EncoderKind> parse_encoder_kind(std::string_view s);

/// Names a feature extractor. Hybrid variants are written "<residual>+<pyramid>".
struct EncoderId {
  EncoderKind kind = EncoderKind::ResidualCnn;
  std::string variant = "resnet18";
  int output_dim = 512;

  static EncoderId residual(std::string variant = "resnet18");
  static EncoderId pyramid(std::string variant = "pvt_tiny");
  static EncoderId hybrid(const std::string& residual_variant = "resnet18",
                          const std::string& pyramid_variant = "pvt_tiny");
  /// Builds the id for (kind, variant) with the matching output_dim; throws InvalidConfig.
  static EncoderId make(EncoderKind kind, const std::string& variant);

  /// Short table label: ResNet, PVT or PVT+ResNet.
  std::string display_name() const;

  friend bool operator==(const EncoderId&, const EncoderId&) = default;
};

struct TileRef {
  std::string sample_id;
  int repeat_index = 0;
  GridPos grid_pos;

  friend bool operator==(const TileRef&, const TileRef&) = default;
};

inline TileRef tile_ref(const Tile& t) { return {t.parent_sample_id, t.repeat_index, t.grid_pos}; }

struct FeatureVector {
  std::vector<float> values;
  EncoderId encoder;
  TileRef tile_ref;
};

struct TypePrediction {
  DrawingType drawing_type = DrawingType::Circle;
  std::array<double, 3> scores{};
};

// ---------------------------------------------------------------------------
// Embedding cache

/// Content-addressed store of raw backbone embeddings keyed by
/// SHA-256(backbone digest, image bytes). Identical tiles met in different
/// folds, ablation cells or runs are embedded once. Thread-safe.
class EmbeddingCache {
 public:
  /// In-memory only when `directory` is empty; otherwise entries persist in
  /// one append-only file per backbone digest.
  explicit EmbeddingCache(std::filesystem::path directory = {});

  static Digest key(const Backbone& backbone, const Image& image);

  std::vector<float> embed(const Backbone& backbone, const Image& image);
  std::optional<std::vector<float>> find(const Backbone& backbone, const Digest& key);

  /// Appends entries computed since the last flush to disk.
  void flush();
  std::size_t size() const;
  std::size_t hits() const;
  std::size_t misses() const;
  const std::filesystem::path& directory() const noexcept { return dir_; }

 private:
  struct DigestHash {
    std::size_t operator()(const Digest& d) const noexcept;
  };
  struct Store {
    int dim = 0;
    std::unordered_map<Digest, std::vector<float>, DigestHash> entries;
    std::vector<Digest> pending;
    bool loaded = false;
  };
  Store& store_for(const Backbone& backbone);

  std::filesystem::path dir_;
  mutable std::mutex mutex_;
  std::map<std::string, Store> stores_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

// ---------------------------------------------------------------------------
// Trainable heads

/// Feature standardisation followed by a square linear map; the trainable part
/// of an encoder (the trunk stays frozen). The initial head is the identity.
struct ProjectionHead {
  int dim = 0;
  std::vector<float> mean;
  std::vector<float> inv_std;
  std::vector<float> weight;  ///< [dim][dim], row-major
  std::vector<float> bias;

  static ProjectionHead identity(int dim);
  std::vector<float> apply(const std::vector<float>& x) const;

  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;
};

/// Standardisation followed by a linear map to class logits.
struct SoftmaxHead {
  int in_dim = 0;
  int classes = 0;
  std::vector<float> mean;
  std::vector<float> inv_std;
  std::vector<float> weight;  ///< [classes][in_dim]
  std::vector<float> bias;

  std::vector<double> probabilities(const std::vector<float>& x) const;

  friend bool operator==(const SoftmaxHead&, const SoftmaxHead&) = default;
};

/// Cross-entropy, Adam, cosine-decayed learning rate. `weight_decay` is an L2
/// penalty on weight matrices (biases exempt); a projection head is pulled
/// toward its initial map rather than toward zero.
struct FinetuneSchedule {
  int epochs = 20;
  int batch_size = 32;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;

  void validate() const;
  friend bool operator==(const FinetuneSchedule&, const FinetuneSchedule&) = default;
};

struct TrainingLog {
  std::vector<double> epoch_loss;
};

/// Trains `head` through a temporary class head on (x, y); y in [0, classes).
/// Returns `head` unchanged for 0 epochs. Throws EmptyTrainingSet, DivergedLoss.
ProjectionHead finetune_projection(const ProjectionHead& head, const std::vector<std::vector<float>>& x,
                                   const std::vector<int>& y, int classes, const FinetuneSchedule& schedule,
                                   TrainingLog* log = nullptr);

SoftmaxHead train_softmax(const std::vector<std::vector<float>>& x, const std::vector<int>& y, int classes,
                          const FinetuneSchedule& schedule, TrainingLog* log = nullptr);

// ---------------------------------------------------------------------------
// Encoders

/// One frozen trunk plus its trainable projection.
struct ComponentState {
  BackboneKind kind = BackboneKind::ResidualCnn;
  std::string variant;
  BackboneSource source;
  std::string backbone_digest;
  ProjectionHead head;
};

/// Persistable encoder: one component, or residual then pyramid for hybrids.
struct EncoderState {
  EncoderId id;
  std::optional<DrawingType> drawing_type;
  std::vector<ComponentState> components;
};

/// Trunk weights for each backbone family: converted weight files when given,
/// otherwise the seeded initialisation.
struct BackboneSources {
  std::uint64_t seed = 0;
  std::filesystem::path residual_weights;
  std::filesystem::path pyramid_weights;

  BackboneSource for_kind(BackboneKind kind) const;
  friend bool operator==(const BackboneSources&, const BackboneSources&) = default;
};

/// Initial (pretrained) state: identity heads over the frozen trunks.
EncoderState initial_encoder_state(const EncoderId& id, const BackboneSources& sources = {});

/// A loaded encoder. Default-constructed encoders are not loaded.
class Encoder {
 public:
  Encoder() = default;
  explicit Encoder(EncoderState state, std::shared_ptr<EmbeddingCache> cache = nullptr);

  bool loaded() const noexcept { return !backbones_.empty(); }
  const EncoderId& id() const;
  const EncoderState& state() const;
  const std::vector<std::shared_ptr<const Backbone>>& backbones() const noexcept { return backbones_; }

  /// Raw trunk embeddings per component (cached when a cache is attached).
  std::vector<std::vector<float>> embed_components(const Image& tile) const;
  /// Projects raw component embeddings and concatenates them in component order.
  std::vector<float> project(const std::vector<std::vector<float>>& raw) const;

 private:
  std::shared_ptr<const EncoderState> state_;
  std::vector<std::shared_ptr<const Backbone>> backbones_;
  std::shared_ptr<EmbeddingCache> cache_;
};

/// Throws ModelNotLoaded for an unloaded encoder and DimensionMismatch for tiles
/// that are not 224 x 224 x 3.
FeatureVector extract_features(const Tile& tile, const Encoder& encoder);

struct LabeledTile {
  const Tile* tile = nullptr;
  Label label = Label::Healthy;
};

/// Head-only fine-tuning on PD/Healthy tiles; each hybrid component is tuned
/// on its own embedding. Throws EmptyTrainingSet, DivergedLoss.
EncoderState finetune(const Encoder& encoder, const std::vector<LabeledTile>& tiles, const FinetuneSchedule& schedule);

/// Same, from precomputed raw embeddings: raw[i][c] is component c of example i.
EncoderState finetune_on_embeddings(const EncoderState& state, const std::vector<std::vector<std::vector<float>>>& raw,
                                    const std::vector<Label>& labels, const FinetuneSchedule& schedule);

void save_encoder(const EncoderState& state, const std::filesystem::path& path, const std::string& config_hash = {});

struct EncoderCheckpoint {
  EncoderState state;
  std::string config_hash;
};

EncoderCheckpoint load_encoder(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stage 1: drawing-type classification

/// The residual trunk downsamples 32x.
inline constexpr int kMinTypeInputSide = 32;

struct TypeClassifierState {
  std::string variant = "resnet18";
  /// Side the canvas is downsampled to before the trunk.
  int input_side = kTileSide;
  BackboneSource source;
  std::string backbone_digest;
  SoftmaxHead head;
};

/// Residual trunk on the full preprocessed canvas, global average pooling and a
/// 3-way softmax. Default-constructed classifiers are not loaded.
///
/// The canvas is downsampled to `input_side` (the trunk's native 224 by default):
/// with frozen trunks the pooled features only describe the figure's overall
/// shape when it fits the receptive field; at full canvas resolution they
/// mostly see stroke texture.
class TypeClassifier {
 public:
  TypeClassifier() = default;
  explicit TypeClassifier(TypeClassifierState state, std::shared_ptr<EmbeddingCache> cache = nullptr);

  bool loaded() const noexcept { return backbone_ != nullptr; }
  const TypeClassifierState& state() const;
  const Backbone& backbone() const;

  /// Accepts the preprocessed canvas at any size.
  std::vector<float> embed(const Image& canvas) const;
  TypePrediction classify_embedding(const std::vector<float>& embedding) const;

 private:
  std::shared_ptr<const TypeClassifierState> state_;
  std::shared_ptr<const Backbone> backbone_;
  std::shared_ptr<EmbeddingCache> cache_;
};

/// Throws ModelNotLoaded.
TypePrediction classify_drawing_type(const Image& canvas, const TypeClassifier& classifier);

/// Canvas resized to `side` and renormalized; identity when it already matches.
Image type_classifier_input(const Image& canvas, int side);

/// `canvas_embeddings` are the trunk's embeddings of type_classifier_input(canvas, input_side).
TypeClassifierState train_type_classifier(const std::vector<std::vector<float>>& canvas_embeddings,
                                          const std::vector<DrawingType>& types, const Backbone& backbone,
                                          const FinetuneSchedule& schedule, int input_side = kTileSide);

void save_type_classifier(const TypeClassifierState& state, const std::filesystem::path& path,
                          const std::string& config_hash = {});

struct TypeClassifierCheckpoint {
  TypeClassifierState state;
  std::string config_hash;
};

TypeClassifierCheckpoint load_type_classifier(const std::filesystem::path& path);

}  // namespace chunkpd
