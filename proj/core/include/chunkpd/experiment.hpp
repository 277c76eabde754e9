#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "chunkpd/classify.hpp"
#include "chunkpd/dataset.hpp"
#include "chunkpd/encoders.hpp"
#include "chunkpd/evaluation.hpp"
#include "chunkpd/preprocess.hpp"

namespace chunkpd {

/// Exactly one source is used: a manifest file, a directory to ingest, or the toy generator.
struct DatasetConfig {
  std::filesystem::path manifest;
  std::filesystem::path root;
  std::filesystem::path layout;
  std::optional<ToyOptions> toy;

  friend bool operator==(const DatasetConfig& a, const DatasetConfig& b) {
    const auto toy_eq = a.toy.has_value() == b.toy.has_value() &&
                        (!a.toy || (a.toy->n_subjects == b.toy->n_subjects && a.toy->seed == b.toy->seed &&
                                    a.toy->image_side == b.toy->image_side));
    return a.manifest == b.manifest && a.root == b.root && a.layout == b.layout && toy_eq;
  }
};

struct TypeConfig {
  EncoderId encoder;
  ClassifierSpec classifier;

  friend bool operator==(const TypeConfig&, const TypeConfig&) = default;
};

/// Per-type defaults follow the best reported configuration: residual + KNN for
/// circles, residual + random forest for meanders, hybrid + KNN for spirals.
std::map<DrawingType, TypeConfig> default_type_configs();

struct ExperimentConfig {
  DatasetConfig dataset;
  int grid = 2;
  bool augment = true;
  AugmentationSpec augmentation;
  std::string stage1_variant = "resnet18";
  int stage1_input_side = kTileSide;
  /// Linear head on frozen canvas embeddings: cheap, so a longer, faster,
  /// regularised schedule.
  FinetuneSchedule stage1{200, 32, 1e-2, 0, 1e-2};
  FinetuneSchedule finetune;
  BackboneSources backbones;
  std::map<DrawingType, TypeConfig> types = default_type_configs();
  SplitStrategy strategy = SplitStrategy::IndCv5;
  std::uint64_t seed = 0;
  unsigned threads = 0;  ///< 0 = hardware concurrency; does not affect results
  std::filesystem::path output_dir = "runs";

  /// Throws InvalidConfig naming the offending field.
  void validate() const;
  /// Canonical JSON text with every default resolved.
  std::string to_json(bool include_output_dir = true) const;
  /// Strict parse: unknown keys and bad values throw InvalidConfig naming the field.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// SHA-256 of the canonical JSON without output_dir and threads.
  std::string hash() const;
};

// ---------------------------------------------------------------------------
// Training and evaluation over a manifest

/// Grid and augmentation switch of one pipeline variant (an ablation cell).
struct CellSettings {
  int grid_n = 2;
  bool augment = true;
};

struct TrainedModels {
  TypeClassifierState stage1;
  std::map<DrawingType, EncoderState> encoders;
  std::map<DrawingType, TrainedClassifier> classifiers;
};

/// Trains and applies the three-stage pipeline on subsets of one manifest.
/// Tiles and their raw trunk embeddings are memoised per (sample, grid,
/// augmentation), and trunk outputs are content-addressed through the
/// EmbeddingCache, so folds and ablation cells never embed the same tile twice.
class Workbench {
 public:
  Workbench(const Manifest& manifest, ExperimentConfig config, std::shared_ptr<EmbeddingCache> cache = nullptr,
            std::string manifest_hash = {});

  const ExperimentConfig& config() const noexcept { return config_; }
  CellSettings default_cell() const { return {config_.grid, config_.augment}; }

  /// Stage-1 on full canvases; stage-2 heads and stage-3 classifiers per drawing
  /// type on training tiles (augmented when the cell enables it). `tag` decorrelates
  /// seeds across folds.
  TrainedModels train(const std::vector<std::size_t>& samples, const CellSettings& cell, const std::string& tag) const;

  /// Routes, tiles (never augmented), embeds, classifies and votes.
  std::vector<EvaluatedImage> predict(const TrainedModels& models, const std::vector<std::size_t>& samples,
                                      const CellSettings& cell) const;

  FoldRunner fold_runner(const CellSettings& cell) const;
  ReportMeta report_meta(const CellSettings& cell) const;

  /// Computes embeddings for `samples` ahead of time, in parallel.
  void prefetch(const std::vector<std::size_t>& samples, const CellSettings& cell) const;

  /// Writes the cell's training tiles and inference tiles to tile caches under
  /// `root` (the preprocess stage); returns the cache directories.
  std::vector<std::filesystem::path> export_tiles(const std::filesystem::path& root, const CellSettings& cell,
                                                  const std::string& config_hash = {}) const;

 private:
  /// Raw embeddings of one sample's tiles under one trunk; immutable once memoised.
  struct TileEmbeddings {
    std::vector<TileRef> refs;
    std::vector<std::vector<float>> raw;
  };
  using TileEmbeddingsPtr = std::shared_ptr<const TileEmbeddings>;

  /// One entry per backbone, in the order given.
  std::vector<TileEmbeddingsPtr> tiles(std::size_t sample, const CellSettings& cell, bool augmented,
                                       const std::vector<std::shared_ptr<const Backbone>>& backbones) const;
  std::vector<float> canvas_embedding(std::size_t sample, const CellSettings& cell) const;
  const std::vector<std::shared_ptr<const Backbone>>& backbones_for(DrawingType type) const;

  const Manifest& manifest_;
  ExperimentConfig config_;
  std::shared_ptr<EmbeddingCache> cache_;
  std::string manifest_hash_;
  std::shared_ptr<const Backbone> stage1_backbone_;
  std::map<DrawingType, EncoderState> initial_;
  std::map<DrawingType, std::vector<std::shared_ptr<const Backbone>>> backbones_;

  mutable std::mutex mutex_;
  mutable std::map<std::string, TileEmbeddingsPtr> tile_memo_;
  mutable std::map<std::string, std::vector<float>> canvas_memo_;
};

// ---------------------------------------------------------------------------
// Run directories

/// `<output_dir>/<first 16 hex of the config hash>/`.
std::filesystem::path run_directory(const ExperimentConfig& config);

/// Exclusive ownership of a run directory via an O_EXCL lock file. Throws RunLocked.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunRecord {
  std::string config_hash;
  std::string created;
  std::string updated;
  /// Artifact name -> path relative to the run directory.
  std::map<std::string, std::string> artifacts;
  std::map<std::string, std::string> environment;

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
  static RunRecord load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;
};

std::map<std::string, std::string> environment_descriptor();

/// Problems found: missing artifacts and artifacts carrying another config hash.
std::vector<std::string> verify_run_record(const RunRecord& record, const std::filesystem::path& run_dir);

// ---------------------------------------------------------------------------
// Lifecycle commands (the CLI is a thin layer over these)

struct IngestOutcome {
  Manifest manifest;
  std::vector<IngestIssue> issues;
  std::vector<Violation> violations;
  std::filesystem::path manifest_path;
};

/// Toy generation (images exported under `<out>/images`) or directory ingest;
/// writes `<out>/manifest.tsv`.
IngestOutcome cmd_ingest(const DatasetConfig& dataset, const std::filesystem::path& out);

struct CommandResult {
  std::filesystem::path run_dir;
  RunRecord record;
  std::vector<std::string> messages;
};

CommandResult cmd_preprocess(const ExperimentConfig& config);
/// Trains stage 1, the three per-type encoders and classifiers on the whole manifest.
CommandResult cmd_train(const ExperimentConfig& config);
/// Cross-validated evaluation; requires cmd_train's checkpoints (MissingArtifact).
CommandResult cmd_evaluate(const ExperimentConfig& config, std::optional<SplitStrategy> strategy = std::nullopt);
CommandResult cmd_ablate(const ExperimentConfig& config);
/// Tables of every report present in the run directory.
std::string cmd_report(const ExperimentConfig& config);

/// Loads (or generates) the configured dataset.
Manifest load_dataset(const DatasetConfig& dataset);

}  // namespace chunkpd
