#include "chunkpd/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "chunkpd/hashing.hpp"
#include "chunkpd/random.hpp"

namespace chunkpd {

namespace fs = std::filesystem;

ChunkGrid::ChunkGrid(int n) : n_(n) {
  if (n < 1 || n > 3) throw Error(ErrorCode::InvalidArgument, "grid side must be 1, 2 or 3, got " + std::to_string(n));
}

int AugmentationSpec::repeats_for(DrawingType t) const {
  const auto it = repeats.find(t);
  return it == repeats.end() ? 1 : it->second;
}

double AugmentationSpec::circle_angle(int repeat_index) const {
  return 360.0 * repeat_index / repeats_for(DrawingType::Circle);
}

void AugmentationSpec::validate() const {
  for (const auto& [type, r] : repeats) {
    if (r < 1) {
      throw Error(ErrorCode::InvalidArgument,
                  "repeat count for " + std::string(to_string(type)) + " must be >= 1, got " + std::to_string(r));
    }
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise_sigma must be >= 0");
}

std::string AugmentationSpec::fingerprint() const {
  std::ostringstream s;
  s.precision(17);
  s << "aug-v1";
  for (auto t : kDrawingTypes) s << ";" << to_string(t) << "=" << repeats_for(t);
  s << ";sigma=" << noise_sigma;
  return sha256_hex(s.str());
}

std::uint64_t augmentation_seed(DrawingType type, const std::string& source_path, int repeat_index) {
  const auto key = std::string(to_string(type)) + "|" + source_path + "|" + std::to_string(repeat_index);
  return leading_u64(sha256(key));
}

// ---------------------------------------------------------------------------

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double src = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    taps[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in - 1), src - lo};
  }
  return taps;
}

// Exact sine/cosine on multiples of 90 degrees.
void exact_sincos(double degrees, double& s, double& c) {
  const double turns = degrees / 90.0;
  if (turns == std::floor(turns)) {
    static constexpr double kSin[4] = {0, 1, 0, -1};
    static constexpr double kCos[4] = {1, 0, -1, 0};
    const auto q = static_cast<int>(((static_cast<long long>(turns) % 4) + 4) % 4);
    s = kSin[q];
    c = kCos[q];
    return;
  }
  const double rad = degrees * std::numbers::pi / 180.0;
  s = std::sin(rad);
  c = std::cos(rad);
}

}  // namespace

Image resize(const Image& image, int side) {
  if (image.empty() || image.pixels.empty()) throw Error(ErrorCode::EmptyImage, "cannot resize an empty image");
  if (side < 1) throw Error(ErrorCode::InvalidArgument, "resize side must be positive");
  const int ch = image.channels;
  const auto ys = bilinear_taps(image.height, side);
  const auto xs = bilinear_taps(image.width, side);
  Image out(side, side, ch);
  for (int y = 0; y < side; ++y) {
    const auto& ty = ys[static_cast<std::size_t>(y)];
    for (int x = 0; x < side; ++x) {
      const auto& tx = xs[static_cast<std::size_t>(x)];
      for (int c = 0; c < ch; ++c) {
        const double top = (1.0 - tx.frac) * image.at(ty.lo, tx.lo, c) + tx.frac * image.at(ty.lo, tx.hi, c);
        const double bottom = (1.0 - tx.frac) * image.at(ty.hi, tx.lo, c) + tx.frac * image.at(ty.hi, tx.hi, c);
        const double v = (1.0 - ty.frac) * top + ty.frac * bottom;
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Image rotate(const Image& image, double degrees, float fill) {
  if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot rotate an empty image");
  double s, c;
  exact_sincos(degrees, s, c);
  const int h = image.height, w = image.width, ch = image.channels;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  Image out(h, w, ch);
  auto sample = [&](int yy, int xx, int cc) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return fill;
    return image.at(yy, xx, cc);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      const double ax = sx - fx0, ay = sy - fy0;
      for (int cc = 0; cc < ch; ++cc) {
        double v = (1 - ay) * (1 - ax) * sample(y0, x0, cc);
        if (ax != 0.0) v += (1 - ay) * ax * sample(y0, x0 + 1, cc);
        if (ay != 0.0) v += ay * (1 - ax) * sample(y0 + 1, x0, cc);
        if (ax != 0.0 && ay != 0.0) v += ay * ax * sample(y0 + 1, x0 + 1, cc);
        out.at(y, x, cc) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::vector<float> noise_field(std::uint64_t seed, int height, int width, double sigma) {
  std::vector<float> field(static_cast<std::size_t>(height) * width);
  fill_normal(seed, static_cast<float>(sigma), field);
  return field;
}

std::vector<AugmentedCopy> augment(const Image& canvas, DrawingType type, const std::string& source_path,
                                   const AugmentationSpec& spec) {
  spec.validate();
  if (canvas.empty()) throw Error(ErrorCode::EmptyImage, "cannot augment an empty canvas");
  const int r = spec.repeats_for(type);
  std::vector<AugmentedCopy> out;
  out.reserve(static_cast<std::size_t>(r));
  switch (type) {
    case DrawingType::Circle:
      for (int k = 0; k < r; ++k) {
        out.push_back({k, k == 0 ? canvas : rotate(canvas, spec.circle_angle(k), kPaperWhite)});
      }
      break;
    case DrawingType::Meander:
    case DrawingType::Spiral:
      for (int k = 0; k < r; ++k) {
        const auto noise =
            noise_field(augmentation_seed(type, source_path, k), canvas.height, canvas.width, spec.noise_sigma);
        Image copy = canvas;
        const int ch = copy.channels;
        for (std::size_t p = 0; p < noise.size(); ++p) {
          for (int c = 0; c < ch; ++c) {
            auto& v = copy.pixels[p * ch + c];
            v = std::clamp(v + noise[p], 0.0f, 1.0f);
          }
        }
        out.push_back({k, std::move(copy)});
      }
      break;
    default:
      throw Error(ErrorCode::UnknownDrawingType, "no augmentation rule for drawing type");
  }
  return out;
}

std::vector<Tile> chunk(const Image& canvas, const ChunkGrid& grid) {
  const int side = grid.canvas_side();
  if (canvas.height != side || canvas.width != side) {
    throw Error(ErrorCode::SizeMismatch, "canvas is " + std::to_string(canvas.height) + "x" +
                                             std::to_string(canvas.width) + ", grid expects " + std::to_string(side));
  }
  const int ch = canvas.channels;
  std::vector<Tile> tiles;
  tiles.reserve(static_cast<std::size_t>(grid.tile_count()));
  for (int r = 0; r < grid.n(); ++r) {
    for (int c = 0; c < grid.n(); ++c) {
      Tile t;
      t.grid_pos = {r, c};
      t.pixels = Image(kTileSide, kTileSide, ch);
      for (int y = 0; y < kTileSide; ++y) {
        const auto src = canvas.pixels.begin() +
                         static_cast<std::ptrdiff_t>(canvas.index(r * kTileSide + y, c * kTileSide, 0));
        std::copy(src, src + kTileSide * ch, t.pixels.pixels.begin() + static_cast<std::ptrdiff_t>(t.pixels.index(y, 0, 0)));
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

Image stitch(const std::vector<Tile>& tiles, const ChunkGrid& grid) {
  if (static_cast<int>(tiles.size()) != grid.tile_count()) {
    throw Error(ErrorCode::SizeMismatch, "stitch needs exactly n^2 tiles");
  }
  const int ch = tiles.front().pixels.channels;
  Image canvas(grid.canvas_side(), grid.canvas_side(), ch);
  for (const auto& t : tiles) {
    if (t.pixels.height != kTileSide || t.pixels.width != kTileSide) {
      throw Error(ErrorCode::SizeMismatch, "tile is not 224x224");
    }
    for (int y = 0; y < kTileSide; ++y) {
      const auto src = t.pixels.pixels.begin() + static_cast<std::ptrdiff_t>(t.pixels.index(y, 0, 0));
      std::copy(src, src + kTileSide * ch,
                canvas.pixels.begin() + static_cast<std::ptrdiff_t>(canvas.index(
                                            t.grid_pos.row * kTileSide + y, t.grid_pos.col * kTileSide, 0)));
    }
  }
  return canvas;
}

void normalize_channels(Image& image) {
  const int ch = image.channels;
  for (int c = 0; c < ch; ++c) {
    float peak = 0.0f;
    for (std::size_t i = static_cast<std::size_t>(c); i < image.pixels.size(); i += static_cast<std::size_t>(ch)) {
      peak = std::max(peak, image.pixels[i]);
    }
    if (peak <= 0.0f || peak == 1.0f) continue;
    for (std::size_t i = static_cast<std::size_t>(c); i < image.pixels.size(); i += static_cast<std::size_t>(ch)) {
      image.pixels[i] = std::min(1.0f, image.pixels[i] / peak);
    }
  }
}

Tile normalize(Tile tile) {
  if (tile.normalized) return tile;
  normalize_channels(tile.pixels);
  tile.normalized = true;
  return tile;
}

std::vector<Tile> run_pipeline(const DrawingSample& sample, const ChunkGrid& grid, const AugmentationSpec& spec,
                               bool augment_enabled) {
  if (!sample.image) throw Error(ErrorCode::EmptyImage, "sample " + sample.sample_id + " has no image");
  Image canvas = resize(*sample.image, grid.canvas_side());
  std::vector<AugmentedCopy> copies;
  if (augment_enabled) {
    copies = augment(canvas, sample.drawing_type, sample.source_path, spec);
  } else {
    copies.push_back({0, std::move(canvas)});
  }
  std::vector<Tile> out;
  out.reserve(copies.size() * static_cast<std::size_t>(grid.tile_count()));
  for (auto& copy : copies) {
    for (auto& t : chunk(copy.image, grid)) {
      t.parent_sample_id = sample.sample_id;
      t.repeat_index = copy.repeat_index;
      out.push_back(normalize(std::move(t)));
    }
  }
  return out;
}

Image prepare_canvas(const DrawingSample& sample, const ChunkGrid& grid) {
  if (!sample.image) throw Error(ErrorCode::EmptyImage, "sample " + sample.sample_id + " has no image");
  Image canvas = resize(*sample.image, grid.canvas_side());
  normalize_channels(canvas);
  return canvas;
}

std::string pipeline_fingerprint(const ChunkGrid& grid, const AugmentationSpec& spec, bool augment_enabled) {
  return sha256_hex("pipeline-v1;grid=" + std::to_string(grid.n()) + ";augment=" + (augment_enabled ? "1" : "0") +
                    ";spec=" + spec.fingerprint());
}

// ---------------------------------------------------------------------------

namespace {

std::string sanitize(const std::string& id) {
  std::string out = id;
  for (auto& ch : out) {
    if (ch == '/' || ch == '\\' || ch == '~' || ch == '\t') ch = '_';
  }
  return out;
}

constexpr std::size_t kTileFloats = static_cast<std::size_t>(kTileSide) * kTileSide * 3;

}  // namespace

TileCache::TileCache(fs::path root, std::string pipeline_fingerprint)
    : dir_(std::move(root) / pipeline_fingerprint.substr(0, 16)), fingerprint_(std::move(pipeline_fingerprint)) {
  fs::create_directories(dir_);
}

fs::path TileCache::path_for(const std::string& sample_id, int repeat_index, GridPos pos) const {
  return dir_ / (sanitize(sample_id) + "~r" + std::to_string(repeat_index) + "~" + std::to_string(pos.row) + "-" +
                 std::to_string(pos.col) + ".f32");
}

void TileCache::put(const Tile& tile) {
  if (tile.pixels.pixels.size() != kTileFloats) throw Error(ErrorCode::SizeMismatch, "tile cache stores 224x224x3");
  const auto path = path_for(tile.parent_sample_id, tile.repeat_index, tile.grid_pos);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(tile.pixels.pixels.data()),
            static_cast<std::streamsize>(kTileFloats * sizeof(float)));
}

std::optional<Tile> TileCache::get(const std::string& sample_id, int repeat_index, GridPos pos) const {
  const auto path = path_for(sample_id, repeat_index, pos);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  Tile t;
  t.parent_sample_id = sample_id;
  t.repeat_index = repeat_index;
  t.grid_pos = pos;
  t.normalized = true;
  t.pixels = Image(kTileSide, kTileSide, 3);
  in.read(reinterpret_cast<char*>(t.pixels.pixels.data()), static_cast<std::streamsize>(kTileFloats * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(kTileFloats * sizeof(float))) {
    throw Error(ErrorCode::FormatError, "truncated tile file " + path.string());
  }
  return t;
}

std::size_t TileCache::size() const {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir_)) n += e.path().extension() == ".f32" ? 1 : 0;
  return n;
}

void TileCache::write_index(const std::string& config_hash) const {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir_)) {
    if (e.path().extension() == ".f32") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::ofstream out(dir_ / "index.tsv", std::ios::binary);
  out << "#chunkpd-tiles\tv1\tfingerprint=" << fingerprint_;
  if (!config_hash.empty()) out << "\tconfig_hash=" << config_hash;
  out << "\n";
  out << "sample_id\trepeat_index\trow\tcol\tfile\n";
  for (const auto& name : names) {
    const auto stem = name.substr(0, name.size() - 4);
    const auto b = stem.rfind('~');
    const auto a = stem.rfind('~', b - 1);
    const auto rc = stem.substr(b + 1);
    const auto dash = rc.find('-');
    out << stem.substr(0, a) << '\t' << stem.substr(a + 2, b - a - 2) << '\t' << rc.substr(0, dash) << '\t'
        << rc.substr(dash + 1) << '\t' << name << '\n';
  }
}

}  // namespace chunkpd
