#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chunkpd/classify.hpp"
#include "chunkpd/common.hpp"
#include "chunkpd/dataset.hpp"

namespace chunkpd {

enum class SplitStrategy : std::uint8_t { ImgCv5, IndCv5, Loio };
enum class Granularity : std::uint8_t { Image, Subject };

std::string_view to_string(SplitStrategy s);
std::optional<SplitStrategy> parse_split_strategy(std::string_view s);
std::string_view to_string(Granularity g);

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Folds over units: sample ids for image granularity, subject ids otherwise.
struct SplitPlan {
  SplitStrategy strategy = SplitStrategy::IndCv5;
  Granularity granularity = Granularity::Subject;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;

  /// Digest of the strategy, seed and every fold's id lists.
  std::string hash() const;
};

/// img_cv5: samples dealt into 5 folds within each (drawing type, label) group.
/// ind_cv5: subjects dealt into 5 folds within each label.
/// loio: one fold per subject, in subject order.
/// Throws TooFewSubjects and DegenerateFold (a training side lacking a class
/// for a drawing type whose samples carry both labels).
SplitPlan make_split(const Manifest& manifest, SplitStrategy strategy, std::uint64_t seed);

/// Sample indices (into manifest.samples) of one fold's train and test sides.
struct FoldSamples {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Throws UnknownId.
FoldSamples fold_samples(const SplitPlan& plan, std::size_t fold, const Manifest& manifest);

struct FoldLeakage {
  std::size_t fold = 0;
  std::vector<std::string> shared_subjects;
};

struct LeakageReport {
  std::vector<FoldLeakage> folds;

  std::size_t total() const;
};

/// Subjects present on both sides of each fold. Throws UnknownId.
LeakageReport audit_leakage(const SplitPlan& plan, const Manifest& manifest);

// ---------------------------------------------------------------------------
// Metrics (PD is the positive class)

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Undefined ratios (zero denominators) are empty, never 0 or 1.
struct Metrics {
  ConfusionCounts counts;
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

Metrics compute_metrics(const ConfusionCounts& counts);

struct ScoredPrediction {
  ImagePrediction prediction;
  Label truth = Label::Healthy;
};

/// Throws EmptyPredictions.
Metrics compute_metrics(const std::vector<ScoredPrediction>& predictions);

/// sum(A_i N_i) / sum(N_i). Throws EmptyInput, or InvalidArgument for N_i = 0.
double weighted_accuracy(const std::vector<std::pair<double, std::size_t>>& per_type);

// ---------------------------------------------------------------------------
// Reports

/// One evaluated image with its routing outcome.
struct EvaluatedImage {
  std::size_t fold = 0;
  std::string sample_id;
  std::string subject_id;
  DrawingType true_type = DrawingType::Circle;
  Label truth = Label::Healthy;
  ImagePrediction prediction;
};

struct TypeReport {
  Metrics metrics;
  std::string backbone;    ///< e.g. "ResNet"
  std::string classifier;  ///< e.g. "KNN"
};

struct FoldReport {
  std::size_t fold = 0;
  std::size_t test_images = 0;
  std::map<DrawingType, Metrics> per_type;
  std::optional<double> weighted_accuracy;
  std::size_t type_correct = 0;
};

struct MetricsReport {
  SplitStrategy strategy = SplitStrategy::IndCv5;
  std::string config_fingerprint;
  std::string split_hash;
  bool augmentation = true;
  int grid_n = 2;
  std::map<DrawingType, TypeReport> per_type;
  std::optional<double> weighted_accuracy;
  /// Accuracy of stage-1 routing over all evaluated images.
  std::optional<double> type_accuracy;
  std::size_t tie_broken = 0;
  std::vector<FoldReport> folds;
  LeakageReport leakage;
  std::vector<EvaluatedImage> images;

  std::string to_json() const;
  /// BB,Draw/Cls,Acc,Prec,Rec,F1,TP,FP,TN,FN,Aug,Chnk then a weighted-average line.
  std::string to_csv() const;
};

/// Runs one fold: given train/test sample indices, returns one EvaluatedImage
/// per test sample (prediction + routing).
using FoldRunner = std::function<std::vector<EvaluatedImage>(const FoldSamples&, std::size_t fold)>;

struct ReportMeta {
  std::string config_fingerprint;
  bool augmentation = true;
  int grid_n = 2;
  std::map<DrawingType, std::pair<std::string, std::string>> labels;  ///< type -> (backbone, classifier)
};

/// Evaluates every fold of `plan` and reduces by fold index. Per-type metrics use
/// the true drawing type; every image counts exactly once.
MetricsReport evaluate_plan(const Manifest& manifest, const SplitPlan& plan, const FoldRunner& runner,
                            const ReportMeta& meta);

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
  bool chunking = true;
  bool augmentation = true;

  friend bool operator==(const AblationCell&, const AblationCell&) = default;
};

/// (on,on), (on,off), (off,on), (off,off).
std::vector<AblationCell> full_ablation_matrix();

struct AblationRow {
  AblationCell cell;
  bool reference = false;
  MetricsReport report;
  /// Weighted accuracy minus the reference cell's.
  std::optional<double> delta;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_json() const;
  std::string to_csv() const;
};

/// Builds the fold runner and report labels for one cell. The (off, *) cells
/// use a 1 x 1 grid; (*, off) cells disable augmentation.
using CellRunnerFactory = std::function<std::pair<FoldRunner, ReportMeta>(const AblationCell&)>;

/// Every cell is evaluated on the same ind_cv5 plan (paired design).
AblationTable run_ablation(const Manifest& manifest, const std::vector<AblationCell>& matrix, std::uint64_t seed,
                           const CellRunnerFactory& factory);

}  // namespace chunkpd
