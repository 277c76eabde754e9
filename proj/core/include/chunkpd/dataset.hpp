#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "chunkpd/common.hpp"

namespace chunkpd {

struct SubjectRecord {
  std::string subject_id;
  Label label = Label::Healthy;
  std::map<std::string, std::string> group_meta;

  friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

struct DrawingSample {
  std::string sample_id;
  std::string subject_id;
  DrawingType drawing_type = DrawingType::Circle;
  Label label = Label::Healthy;
  /// Relative to the manifest root when one is set.
  std::string source_path;
  /// Decoded 3-channel image in [0,1]; shared and immutable once built.
  std::shared_ptr<const Image> image;
};

struct ManifestCounts {
  std::map<DrawingType, std::size_t> per_type;
  std::map<Label, std::size_t> per_label;

  friend bool operator==(const ManifestCounts&, const ManifestCounts&) = default;
};

/// Subjects and samples sorted by (subject_id, drawing_type, source_path).
struct Manifest {
  std::filesystem::path root;
  std::vector<SubjectRecord> subjects;
  std::vector<DrawingSample> samples;
  ManifestCounts counts;

  const SubjectRecord* find_subject(const std::string& id) const;
  const DrawingSample* find_sample(const std::string& id) const;
  /// Content digest over the record fields and image bytes.
  std::string digest() const;
};

ManifestCounts tally(const std::vector<DrawingSample>& samples);

/// Restores the canonical ordering and recomputes counts.
void canonicalize(Manifest& m);

// ---------------------------------------------------------------------------
// Layout descriptors

/// One path rule: a glob over the root-relative path where each `*` captures a
/// path segment fragment, and field templates referencing captures as $1..$9.
struct LayoutRule {
  std::string glob;
  std::string subject;       ///< e.g. "$2"
  std::string drawing_type;  ///< e.g. "$3" or a literal "spiral"
  std::string label;         ///< e.g. "$1" or a literal "PD"
};

struct Layout {
  std::vector<LayoutRule> rules;

  /// `<label>/<subject>/<type>_<k>.<ext>`, the layout written by the toy exporter.
  static Layout standard();
  static Layout parse(const std::string& text);
  static Layout load(const std::filesystem::path& path);
};

/// Glob match with captures; `*` never crosses '/', `?` matches one character.
bool glob_match(std::string_view pattern, std::string_view text, std::vector<std::string>& captures);

/// Maps dataset-specific tokens ("Circles", "circA", "mea3", "sp1", ...) to a drawing type.
std::optional<DrawingType> drawing_type_from_token(std::string_view token);
/// Maps "PD", "Patient(s)", "Parkinson", "Healthy", "Control(s)" to a label.
std::optional<Label> label_from_token(std::string_view token);

struct IngestIssue {
  std::string path;
  std::string reason;
};

struct IngestResult {
  Manifest manifest;
  std::vector<IngestIssue> issues;
};

/// Walks `root`, maps files through `layout` and decodes matching images.
/// Throws MissingRoot, LabelConflict, UnknownDrawingType. Files that match no
/// rule or fail to decode are returned as issues.
IngestResult ingest_directory(const std::filesystem::path& root, const Layout& layout = Layout::standard(),
                              unsigned threads = 0);

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind {
  DanglingSubject,
  DuplicateId,
  LabelMismatch,
  CountMismatch,
  UnorderedRecords,
  InvalidImage,
};

std::string_view to_string(ViolationKind k);

struct Violation {
  ViolationKind kind;
  std::string record;
  std::string detail;
};

std::vector<Violation> validate_manifest(const Manifest& m);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct ToyOptions {
  int n_subjects = 10;
  std::uint64_t seed = 0;
  int image_side = 512;
  /// When false, samples carry no image (enough for split and metric work).
  bool render_images = true;
};

/// Procedurally drawn circle/meander/spiral corpus with 1/4/4 drawings per
/// subject. PD subjects receive tremor-like stroke jitter. Pixel values are
/// quantised to 8 bits so PNG export round-trips exactly.
Manifest synthesize_toy_manifest(const ToyOptions& options);
inline Manifest synthesize_toy_manifest(int n_subjects, std::uint64_t seed) {
  return synthesize_toy_manifest(ToyOptions{n_subjects, seed, 512});
}

/// Number of PD subjects the toy generator assigns for `n_subjects`.
int toy_pd_count(int n_subjects);

/// Writes every sample image as an 8-bit PNG under `dir` at its source_path.
void export_images(const Manifest& m, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Manifest file

inline constexpr int kManifestVersion = 1;

/// Tab-separated: a versioned header line, a column line, then one sample per line.
std::string serialize_manifest(const Manifest& m, const std::string& config_hash = {});
void write_manifest(const Manifest& m, const std::filesystem::path& path, const std::string& config_hash = {});

struct ManifestFile {
  Manifest manifest;
  std::string config_hash;
};

/// Parses a manifest file; images are decoded from root/source_path when `load_images`
/// (a relative root is taken relative to the manifest file).
ManifestFile read_manifest(const std::filesystem::path& path, bool load_images = true);

/// Decodes an image file to 3-channel float in [0,1]; grayscale is replicated.
Image decode_image(const std::filesystem::path& path);
void encode_png(const Image& image, const std::filesystem::path& path);

}  // namespace chunkpd
