#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "chunkpd/dataset.hpp"

namespace chunkpd {

namespace fs = std::filesystem;

Image decode_image(const fs::path& path) {
  const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw Error(ErrorCode::IoError, "cannot decode image " + path.string());

  // Divide rather than multiply by the reciprocal: k / 255.0f round-trips exactly.
  float full_scale = 1.0f;
  switch (raw.depth()) {
    case CV_8U: full_scale = 255.0f; break;
    case CV_16U: full_scale = 65535.0f; break;
    case CV_32F: break;
    default: throw Error(ErrorCode::IoError, "unsupported pixel depth in " + path.string());
  }
  cv::Mat f;
  raw.convertTo(f, CV_32F);

  const int ch = f.channels();
  if (ch != 1 && ch != 3 && ch != 4) throw Error(ErrorCode::IoError, "unsupported channel count in " + path.string());
  Image img(f.rows, f.cols, 3);
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < f.cols; ++x) {
      const float* raw_px = row + static_cast<std::ptrdiff_t>(x) * ch;
      float px[4];
      for (int c = 0; c < ch; ++c) px[c] = raw_px[c] / full_scale;
      float rgb[3];
      if (ch == 1) {
        rgb[0] = rgb[1] = rgb[2] = px[0];
      } else {
        // OpenCV stores BGR(A); translucent pixels are composited over white paper.
        const float alpha = ch == 4 ? px[3] : 1.0f;
        for (int c = 0; c < 3; ++c) rgb[c] = px[2 - c] * alpha + (1.0f - alpha);
      }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(rgb[c], 0.0f, 1.0f);
    }
  }
  return img;
}

void encode_png(const Image& image, const fs::path& path) {
  if (image.empty() || image.channels != 3) throw Error(ErrorCode::InvalidArgument, "PNG export needs 3 channels");
  cv::Mat out(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(y, x, c), 0.0f, 1.0f);
        row[x * 3 + (2 - c)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

void export_images(const Manifest& m, const fs::path& dir) {
  for (const auto& s : m.samples) {
    if (!s.image) throw Error(ErrorCode::MissingArtifact, "sample " + s.sample_id + " has no decoded image");
    encode_png(*s.image, dir / s.source_path);
  }
}

}  // namespace chunkpd
