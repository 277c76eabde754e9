#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "chunkpd/common.hpp"
#include "chunkpd/dataset.hpp"
#include "chunkpd/encoders.hpp"
#include "chunkpd/preprocess.hpp"

namespace chunkpd {

enum class ClassifierKind : std::uint8_t { Knn, DecisionTree, RandomForest, NeuralNet };

std::string_view to_string(ClassifierKind k);
std::optional<ClassifierKind> parse_classifier_kind(std::string_view s);
/// Table abbreviation: KNN, DT, RF, NN.
std::string_view short_name(ClassifierKind k);

/// Tile classifier configuration. Recognised hyperparameters (defaults):
///   knn            k=5, standardize=1
///   decision_tree  max_depth=0 (unlimited), min_samples_split=2
///   random_forest  n_trees=100, max_depth=0, min_samples_split=2, max_features=0 (sqrt)
///   neural_net     hidden=128, epochs=200, learning_rate=1e-3, batch_size=32
struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::Knn;
  std::map<std::string, double> hyperparams;
  std::uint64_t seed = 0;

  ClassifierSpec() = default;
  /// Validates on construction; throws InvalidConfig naming the offending key.
  ClassifierSpec(ClassifierKind kind, std::map<std::string, double> hyperparams = {}, std::uint64_t seed = 0);

  void validate() const;
  /// Hyperparameter value with the kind's default filled in.
  double get(const std::string& key) const;
  /// Every hyperparameter of the kind with defaults resolved.
  std::map<std::string, double> resolved() const;

  /// Semantic: a hyperparameter spelled out at its default equals an omitted one.
  friend bool operator==(const ClassifierSpec& a, const ClassifierSpec& b) {
    return a.kind == b.kind && a.seed == b.seed && a.resolved() == b.resolved();
  }
};

struct TilePrediction {
  TileRef tile_ref;
  Label label = Label::Healthy;
  double score = 0.0;  ///< PD confidence
};

struct ImagePrediction {
  std::string sample_id;
  Label label = Label::Healthy;
  int pd_votes = 0;
  int healthy_votes = 0;
  double mean_score = 0.0;
  bool tie_broken = false;
  /// Stage-1 decision when produced by predict_image.
  std::optional<DrawingType> routed_type;
};

/// Fitted model behind a TrainedClassifier.
class ClassifierModel {
 public:
  virtual ~ClassifierModel() = default;
  /// PD probability of one raw feature row, in [0,1].
  virtual double score(const std::vector<float>& x) const = 0;
  /// Model body in the checkpoint encoding (CBOR).
  virtual std::vector<std::uint8_t> serialize() const = 0;
};

class TrainedClassifier {
 public:
  TrainedClassifier() = default;
  TrainedClassifier(ClassifierSpec spec, int feature_dim, std::string manifest_hash,
                    std::shared_ptr<const ClassifierModel> model);

  bool loaded() const noexcept { return model_ != nullptr; }
  const ClassifierSpec& spec() const noexcept { return spec_; }
  int feature_dim() const noexcept { return feature_dim_; }
  const std::string& manifest_hash() const noexcept { return manifest_hash_; }
  const ClassifierModel& model() const;

  /// PD score of a raw feature row; throws DimensionMismatch.
  double score(const std::vector<float>& x) const;

 private:
  ClassifierSpec spec_;
  int feature_dim_ = 0;
  std::string manifest_hash_;
  std::shared_ptr<const ClassifierModel> model_;
};

struct LabeledFeature {
  FeatureVector feature;
  Label label = Label::Healthy;
};

/// Throws EmptyFeatures, SingleClassTraining, DimensionMismatch.
TrainedClassifier train_classifier(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                   const std::vector<Label>& y, const std::string& manifest_hash = {});
TrainedClassifier train_classifier(const ClassifierSpec& spec, const std::vector<LabeledFeature>& features,
                                   const std::string& manifest_hash = {});

/// label = PD iff score >= 0.5. Throws DimensionMismatch, ModelNotLoaded.
TilePrediction predict_tile(const TrainedClassifier& classifier, const FeatureVector& feature);

/// Majority vote over one image's tiles. Ties go to the side with the greater
/// mean score (mean PD score vs 0.5), and to PD when that is level too.
/// Throws EmptyVote, MixedParents.
ImagePrediction vote(const std::vector<TilePrediction>& tiles);

void save_classifier(const TrainedClassifier& classifier, const std::filesystem::path& path,
                     const std::string& config_hash = {});

struct ClassifierCheckpoint {
  TrainedClassifier classifier;
  std::string config_hash;
};

/// Throws DimensionMismatch when `expected_dim` is given and differs from the stored one.
ClassifierCheckpoint load_classifier(const std::filesystem::path& path, std::optional<int> expected_dim = std::nullopt);

// ---------------------------------------------------------------------------
// Full three-stage inference

struct TrainedPipeline {
  ChunkGrid grid;
  AugmentationSpec augmentation;
  TypeClassifier type_classifier;
  std::map<DrawingType, Encoder> encoders;
  std::map<DrawingType, TrainedClassifier> classifiers;
};

/// Stage-1 routing on the canvas, then the routed type's encoder and classifier
/// on the n x n unaugmented tiles, then the vote.
ImagePrediction predict_image(const DrawingSample& sample, const TrainedPipeline& pipeline);

}  // namespace chunkpd
