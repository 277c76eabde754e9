#include "chunkpd/common.hpp"

#include <algorithm>
#include <cctype>

namespace chunkpd {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

std::string_view to_string(DrawingType t) {
  switch (t) {
    case DrawingType::Circle:
      return "circle";
    case DrawingType::Meander:
      return "meander";
    case DrawingType::Spiral:
      return "spiral";
  }
  return "?";
}

std::string_view to_string(Label l) { return l == Label::PD ? "PD" : "Healthy"; }

std::optional<DrawingType> parse_drawing_type(std::string_view s) {
  const auto v = lower(s);
  if (v == "circle") return DrawingType::Circle;
  if (v == "meander") return DrawingType::Meander;
  if (v == "spiral") return DrawingType::Spiral;
  return std::nullopt;
}

std::optional<Label> parse_label(std::string_view s) {
  const auto v = lower(s);
  if (v == "pd") return Label::PD;
  if (v == "healthy") return Label::Healthy;
  return std::nullopt;
}

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingRoot: return "MissingRoot";
    case ErrorCode::LabelConflict: return "LabelConflict";
    case ErrorCode::UnknownDrawingType: return "UnknownDrawingType";
    case ErrorCode::TooFewSubjects: return "TooFewSubjects";
    case ErrorCode::EmptyImage: return "EmptyImage";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::ModelNotLoaded: return "ModelNotLoaded";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::SingleClassTraining: return "SingleClassTraining";
    case ErrorCode::EmptyFeatures: return "EmptyFeatures";
    case ErrorCode::EmptyVote: return "EmptyVote";
    case ErrorCode::MixedParents: return "MixedParents";
    case ErrorCode::DegenerateFold: return "DegenerateFold";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::EmptyPredictions: return "EmptyPredictions";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::RunLocked: return "RunLocked";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace chunkpd
