#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chunkpd {

enum class DrawingType : std::uint8_t { Circle = 0, Meander = 1, Spiral = 2 };
enum class Label : std::uint8_t { Healthy = 0, PD = 1 };

inline constexpr std::array<DrawingType, 3> kDrawingTypes = {DrawingType::Circle, DrawingType::Meander,
                                                             DrawingType::Spiral};

std::string_view to_string(DrawingType t);
std::string_view to_string(Label l);

/// Parses the canonical names ("circle", "meander", "spiral").
std::optional<DrawingType> parse_drawing_type(std::string_view s);
/// Parses "PD" / "Healthy" (case-insensitive).
std::optional<Label> parse_label(std::string_view s);

enum class ErrorCode {
  MissingRoot,
  LabelConflict,
  UnknownDrawingType,
  TooFewSubjects,
  EmptyImage,
  SizeMismatch,
  ModelNotLoaded,
  DimensionMismatch,
  EmptyTrainingSet,
  DivergedLoss,
  SingleClassTraining,
  EmptyFeatures,
  EmptyVote,
  MixedParents,
  DegenerateFold,
  UnknownId,
  EmptyPredictions,
  EmptyInput,
  InvalidArgument,
  InvalidConfig,
  MissingArtifact,
  FormatError,
  IoError,
  RunLocked,
};

std::string_view to_string(ErrorCode code);

/// The single exception type thrown by the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Dense H x W x C float image, row-major, channels interleaved.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  bool empty() const noexcept { return height <= 0 || width <= 0; }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c) noexcept { return pixels[index(y, x, c)]; }
  float at(int y, int x, int c) const noexcept { return pixels[index(y, x, c)]; }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace chunkpd
