#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chunkpd/common.hpp"
#include "chunkpd/dataset.hpp"

namespace chunkpd {

inline constexpr int kTileSide = 224;
inline constexpr float kPaperWhite = 1.0f;

/// n x n partition of a (224 n)-pixel square canvas. n in {1, 2, 3}.
class ChunkGrid {
 public:
  explicit ChunkGrid(int n = 2);

  int n() const noexcept { return n_; }
  int canvas_side() const noexcept { return n_ * kTileSide; }
  int tile_count() const noexcept { return n_ * n_; }

  friend bool operator==(const ChunkGrid&, const ChunkGrid&) = default;

 private:
  int n_;
};

/// Type-conditioned deterministic augmentation: fixed rotations for circles,
/// seeded Gaussian noise for meanders and spirals.
struct AugmentationSpec {
  std::map<DrawingType, int> repeats{{DrawingType::Circle, 4}, {DrawingType::Meander, 2}, {DrawingType::Spiral, 2}};
  double noise_sigma = 0.003;

  int repeats_for(DrawingType t) const;
  /// Rotation angle in degrees of circle repeat k: 360 k / r_circle.
  double circle_angle(int repeat_index) const;
  /// Throws InvalidArgument when a repeat count is < 1 or sigma < 0.
  void validate() const;
  /// Stable digest of every field; part of tile cache keys.
  std::string fingerprint() const;

  friend bool operator==(const AugmentationSpec&, const AugmentationSpec&) = default;
};

/// Seed of one augmented copy: the leading 8 bytes (big-endian) of
/// SHA-256("<drawing_type>|<source_path>|<repeat_index>").
std::uint64_t augmentation_seed(DrawingType type, const std::string& source_path, int repeat_index);

struct GridPos {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const GridPos&, const GridPos&) = default;
};

struct Tile {
  std::string parent_sample_id;
  int repeat_index = 0;
  GridPos grid_pos;
  Image pixels;
  bool normalized = false;
};

struct AugmentedCopy {
  int repeat_index;
  Image image;
};

/// Bilinear resize to side x side (half-pixel centres, edge clamped). Throws EmptyImage.
Image resize(const Image& image, int side);

/// Rotation about the image centre by `degrees` (counter-clockwise with y up, i.e.
/// clockwise on screen: out(0,0) = in(h-1,0) at 90), bilinear,
/// with out-of-canvas samples filled by `fill`. Quarter turns are exact.
Image rotate(const Image& image, double degrees, float fill = kPaperWhite);

/// Noise field of one meander/spiral copy, one value per pixel (shared by all channels).
std::vector<float> noise_field(std::uint64_t seed, int height, int width, double sigma);

std::vector<AugmentedCopy> augment(const Image& canvas, DrawingType type, const std::string& source_path,
                                   const AugmentationSpec& spec);

/// Row-major n x n tiles; throws SizeMismatch when the canvas side is not grid.canvas_side().
std::vector<Tile> chunk(const Image& canvas, const ChunkGrid& grid);

/// Inverse of chunk(): reassembles row-major tiles into the canvas.
Image stitch(const std::vector<Tile>& tiles, const ChunkGrid& grid);

/// Scales each channel so its maximum is 1; all-zero channels stay unchanged.
Tile normalize(Tile tile);
void normalize_channels(Image& image);

/// resize -> augment (optional) -> chunk -> normalize.
std::vector<Tile> run_pipeline(const DrawingSample& sample, const ChunkGrid& grid, const AugmentationSpec& spec,
                               bool augment_enabled);

/// Resized and normalised full canvas, the input of drawing-type classification.
Image prepare_canvas(const DrawingSample& sample, const ChunkGrid& grid);

/// Digest of everything that determines a tile's pixels except the sample itself.
std::string pipeline_fingerprint(const ChunkGrid& grid, const AugmentationSpec& spec, bool augment_enabled);

// ---------------------------------------------------------------------------

/// On-disk tile cache: one raw float32 file per (sample, repeat, grid position)
/// under a directory keyed by the pipeline fingerprint, plus a tab-separated index.
class TileCache {
 public:
  TileCache(std::filesystem::path root, std::string pipeline_fingerprint);

  const std::filesystem::path& directory() const noexcept { return dir_; }
  const std::string& fingerprint() const noexcept { return fingerprint_; }

  std::filesystem::path path_for(const std::string& sample_id, int repeat_index, GridPos pos) const;
  void put(const Tile& tile);
  std::optional<Tile> get(const std::string& sample_id, int repeat_index, GridPos pos) const;
  /// Rewrites index.tsv from the files present; the header carries `config_hash` when given.
  void write_index(const std::string& config_hash = {}) const;
  std::size_t size() const;

 private:
  std::filesystem::path dir_;
  std::string fingerprint_;
};

}  // namespace chunkpd
