#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "chunkpd/dataset.hpp"
#include "chunkpd/hashing.hpp"
#include "chunkpd/random.hpp"

namespace chunkpd {

namespace {

constexpr double kPi = std::numbers::pi;

struct Point {
  double x;
  double y;
};

// Per-subject drawing style. Coordinates are in units of the canvas side.
struct Style {
  double stroke_px;      // pen width at 512 px
  double scale;          // figure size multiplier
  double dx, dy;         // centre offset
  double ink;            // darkness of the pen
  double wobble_amp;     // slow hand drift
  double wobble_len;
  double tremor_amp;     // 0 for healthy subjects
  double tremor_len;
};

Style draw_style(Rng& rng, Label label) {
  Style s{};
  s.stroke_px = 2.2 + 1.2 * rng.uniform();
  s.scale = 0.86 + 0.12 * rng.uniform();
  s.dx = 0.03 * (rng.uniform() - 0.5);
  s.dy = 0.03 * (rng.uniform() - 0.5);
  s.ink = 0.78 + 0.2 * rng.uniform();
  s.wobble_amp = 0.002 + 0.004 * rng.uniform();
  s.wobble_len = 0.25 + 0.2 * rng.uniform();
  if (label == Label::PD) {
    s.tremor_amp = 0.0035 + 0.0035 * rng.uniform();
    s.tremor_len = 0.018 + 0.014 * rng.uniform();
  }
  return s;
}

// Template paths in [-0.5, 0.5]^2 before styling.
std::vector<Point> circle_path(Rng& rng) {
  const double r = 0.36 * (0.95 + 0.1 * rng.uniform());
  const double ecc = 0.04 * (rng.uniform() - 0.5);
  const double start = 2.0 * kPi * rng.uniform();
  std::vector<Point> pts;
  const int n = 720;
  for (int i = 0; i <= n; ++i) {
    const double t = start + 2.05 * kPi * i / n;
    const double rr = r * (1.0 + ecc * std::cos(2.0 * t));
    pts.push_back({rr * std::cos(t), rr * std::sin(t)});
  }
  return pts;
}

std::vector<Point> spiral_path(Rng& rng) {
  const double turns = 3.2 + 0.6 * rng.uniform();
  const double r_max = 0.38 * (0.95 + 0.1 * rng.uniform());
  const double phase = 2.0 * kPi * rng.uniform();
  std::vector<Point> pts;
  const int n = 1600;
  for (int i = 0; i <= n; ++i) {
    const double u = 0.03 + 0.97 * i / n;
    const double theta = phase + 2.0 * kPi * turns * u;
    pts.push_back({r_max * u * std::cos(theta), r_max * u * std::sin(theta)});
  }
  return pts;
}

// Rectilinear square spiral with lengths 1,1,2,2,3,3,... steps.
std::vector<Point> meander_path(Rng& rng) {
  const int legs = 14 + static_cast<int>(rng.below(3));
  const double step = 0.72 / (legs / 2 + 1);
  static constexpr int kDx[4] = {1, 0, -1, 0};
  static constexpr int kDy[4] = {0, 1, 0, -1};
  std::vector<Point> corners{{0.0, 0.0}};
  Point p{0.0, 0.0};
  for (int leg = 0; leg < legs; ++leg) {
    const double len = step * (leg / 2 + 1);
    p = {p.x + kDx[leg % 4] * len, p.y + kDy[leg % 4] * len};
    corners.push_back(p);
  }
  double cx = 0, cy = 0;
  for (const auto& c : corners) {
    cx += c.x;
    cy += c.y;
  }
  cx /= corners.size();
  cy /= corners.size();
  std::vector<Point> pts;
  for (std::size_t i = 0; i + 1 < corners.size(); ++i) {
    const int n = 80;
    for (int k = 0; k < n; ++k) {
      const double t = static_cast<double>(k) / n;
      pts.push_back({corners[i].x + t * (corners[i + 1].x - corners[i].x) - cx,
                     corners[i].y + t * (corners[i + 1].y - corners[i].y) - cy});
    }
  }
  pts.push_back({corners.back().x - cx, corners.back().y - cy});
  return pts;
}

// Resamples to uniform arc-length spacing `ds` and displaces along the normal.
std::vector<Point> stylise(const std::vector<Point>& base, const Style& st, Rng& rng, double ds) {
  std::vector<Point> dense;
  dense.push_back(base.front());
  double carry = 0.0;
  for (std::size_t i = 1; i < base.size(); ++i) {
    const double sx = base[i].x - base[i - 1].x;
    const double sy = base[i].y - base[i - 1].y;
    const double len = std::hypot(sx, sy);
    double t = ds - carry;
    while (t <= len) {
      dense.push_back({base[i - 1].x + sx * t / len, base[i - 1].y + sy * t / len});
      t += ds;
    }
    carry = len - (t - ds);
  }

  const double wobble_phase = 2.0 * kPi * rng.uniform();
  const double tremor_phase = 2.0 * kPi * rng.uniform();
  const double tremor_jitter = 0.25 + 0.2 * rng.uniform();
  std::vector<Point> out(dense.size());
  double s = 0.0;
  double tremor_freq_drift = 0.0;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const std::size_t a = i == 0 ? 0 : i - 1;
    const std::size_t b = std::min(i + 1, dense.size() - 1);
    double tx = dense[b].x - dense[a].x;
    double ty = dense[b].y - dense[a].y;
    const double tl = std::max(1e-12, std::hypot(tx, ty));
    tx /= tl;
    ty /= tl;
    double offset = st.wobble_amp * std::sin(2.0 * kPi * s / st.wobble_len + wobble_phase);
    if (st.tremor_amp > 0.0) {
      tremor_freq_drift += 0.05 * (rng.uniform() - 0.5);
      tremor_freq_drift = std::clamp(tremor_freq_drift, -tremor_jitter, tremor_jitter);
      offset += st.tremor_amp * std::sin(2.0 * kPi * s / st.tremor_len * (1.0 + 0.3 * tremor_freq_drift) +
                                         tremor_phase);
    }
    out[i] = {dense[i].x - ty * offset, dense[i].y + tx * offset};
    s += ds;
  }
  return out;
}

Image render(const std::vector<Point>& path, const Style& st, int side) {
  std::vector<float> ink(static_cast<std::size_t>(side) * side, 0.0f);
  const double half_w = 0.5 * st.stroke_px * side / 512.0;
  const int reach = static_cast<int>(std::ceil(half_w + 1.0));
  for (const auto& p : path) {
    const double px = (0.5 + st.dx + st.scale * p.x) * side - 0.5;
    const double py = (0.5 + st.dy + st.scale * p.y) * side - 0.5;
    const int x0 = static_cast<int>(std::floor(px)) - reach;
    const int y0 = static_cast<int>(std::floor(py)) - reach;
    for (int y = std::max(0, y0); y <= std::min(side - 1, y0 + 2 * reach + 1); ++y) {
      for (int x = std::max(0, x0); x <= std::min(side - 1, x0 + 2 * reach + 1); ++x) {
        const double d = std::hypot(x - px, y - py);
        const double cov = std::clamp(half_w + 0.5 - d, 0.0, 1.0);
        auto& v = ink[static_cast<std::size_t>(y) * side + x];
        v = std::max(v, static_cast<float>(cov));
      }
    }
  }
  Image img(side, side, 3);
  for (std::size_t i = 0; i < ink.size(); ++i) {
    const double value = 1.0 - st.ink * ink[i];
    const float q = static_cast<float>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0)) / 255.0f;
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = q;
  }
  return img;
}

}  // namespace

int toy_pd_count(int n_subjects) {
  // Same PD share as the reference corpus (31 of 66), at least one per class.
  const int pd = static_cast<int>(std::lround(n_subjects * 31.0 / 66.0));
  return std::clamp(pd, 1, n_subjects - 1);
}

Manifest synthesize_toy_manifest(const ToyOptions& options) {
  if (options.n_subjects < 2) {
    throw Error(ErrorCode::TooFewSubjects, "toy corpus needs at least 2 subjects (one per label)");
  }
  if (options.image_side < 16) throw Error(ErrorCode::InvalidArgument, "toy image_side must be >= 16");

  const int n = options.n_subjects;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng assign(derive_seed(options.seed, "toy/labels"));
  assign.shuffle(order);
  std::vector<Label> labels(static_cast<std::size_t>(n), Label::Healthy);
  for (int i = 0; i < toy_pd_count(n); ++i) labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Label::PD;

  Manifest m;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "S%03d", i + 1);
    const Label label = labels[static_cast<std::size_t>(i)];
    m.subjects.push_back({id, label, {{"source", "toy"}}});

    Rng subject_rng(derive_seed(options.seed, std::string("toy/subject/") + id));
    const Style style = draw_style(subject_rng, label);
    const struct {
      DrawingType type;
      int count;
    } plan[] = {{DrawingType::Circle, 1}, {DrawingType::Meander, 4}, {DrawingType::Spiral, 4}};
    for (const auto& [type, count] : plan) {
      for (int k = 0; k < count; ++k) {
        const auto name = std::string(to_string(type)) + "_" + std::to_string(k);
        Rng rng(derive_seed(options.seed, std::string("toy/drawing/") + id + "/" + name));
        std::vector<Point> base;
        switch (type) {
          case DrawingType::Circle: base = circle_path(rng); break;
          case DrawingType::Meander: base = meander_path(rng); break;
          case DrawingType::Spiral: base = spiral_path(rng); break;
        }
        DrawingSample s;
        s.sample_id = std::string(id) + "_" + name;
        s.subject_id = id;
        s.drawing_type = type;
        s.label = label;
        s.source_path = std::string(to_string(label)) + "/" + id + "/" + name + ".png";
        if (options.render_images) {
          const double ds = 0.4 / options.image_side;
          s.image = std::make_shared<const Image>(render(stylise(base, style, rng, ds), style, options.image_side));
        }
        m.samples.push_back(std::move(s));
      }
    }
  }
  canonicalize(m);
  return m;
}

}  // namespace chunkpd
