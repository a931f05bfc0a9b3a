#pragma once

// Synthetic 10-class stroke-glyph images (digit-like, black background).
// Each glyph is a set of polylines in the unit square; samples are rendered
// with a random rotation, scale, translation, stroke width and ink level so
// that classes overlap somewhat in pixel space.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "scae/util.hpp"

namespace scae {

struct Point2 {
  double x, y;
};

using Polyline = std::vector<Point2>;

namespace toy_detail {

inline Polyline arc(Point2 c, double rx, double ry, double from_deg, double to_deg,
                    int segments = 16) {
  Polyline out;
  for (int i = 0; i <= segments; ++i) {
    const double t = (from_deg + (to_deg - from_deg) * i / segments) * std::numbers::pi / 180.0;
    out.push_back({c.x + rx * std::cos(t), c.y + ry * std::sin(t)});
  }
  return out;
}

inline double segment_distance(Point2 p, Point2 a, Point2 b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx);
  const double ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace toy_detail

// Glyph strokes for classes 0..9, y pointing down.
inline std::vector<Polyline> toy_glyph(int label) {
  using toy_detail::arc;
  switch (label) {
    case 0: return {arc({0.5, 0.5}, 0.26, 0.38, 0, 360, 24)};
    case 1: return {{{0.35, 0.25}, {0.52, 0.1}, {0.52, 0.9}}};
    case 2:
      return {{{0.25, 0.25}, {0.4, 0.1}, {0.65, 0.1}, {0.75, 0.25}, {0.7, 0.45},
               {0.25, 0.9}, {0.78, 0.9}}};
    case 3:
      return {{{0.25, 0.12}, {0.72, 0.12}, {0.48, 0.45}, {0.72, 0.6}, {0.68, 0.85},
               {0.45, 0.92}, {0.25, 0.82}}};
    case 4: return {{{0.65, 0.9}, {0.65, 0.1}, {0.22, 0.65}, {0.8, 0.65}}};
    case 5:
      return {{{0.75, 0.1}, {0.3, 0.1}, {0.27, 0.45}, {0.6, 0.42}, {0.75, 0.62},
               {0.65, 0.85}, {0.25, 0.88}}};
    case 6:
      return {{{0.7, 0.12}, {0.42, 0.28}, {0.28, 0.6}, {0.35, 0.85}, {0.6, 0.88},
               {0.72, 0.68}, {0.55, 0.52}, {0.3, 0.6}}};
    case 7: return {{{0.22, 0.12}, {0.78, 0.12}, {0.42, 0.9}}};
    case 8: return {arc({0.5, 0.3}, 0.18, 0.18, 0, 360), arc({0.5, 0.68}, 0.22, 0.22, 0, 360)};
    case 9: return {arc({0.5, 0.32}, 0.2, 0.2, 0, 360), {{0.7, 0.32}, {0.62, 0.9}}};
    default: break;
  }
  throw std::invalid_argument("toy_glyph: label must be in 0..9");
}

struct ToySample {
  std::vector<double> pixels;
  int label;
};

// Renders one jittered glyph into an H x W image with values in [0,1] and
// exact zeros away from the strokes.
inline std::vector<double> render_toy_glyph(int label, std::size_t H, std::size_t W, Rng& rng) {
  const double angle = uniform(rng, -0.2, 0.2);
  const double scale = uniform(rng, 0.62, 0.78) * static_cast<double>(std::min(H, W));
  const double shear = uniform(rng, -0.15, 0.15);
  const double cx = static_cast<double>(W) / 2 + uniform(rng, -1.5, 1.5);
  const double cy = static_cast<double>(H) / 2 + uniform(rng, -1.5, 1.5);
  const double radius = uniform(rng, 1.0, 1.8);
  const double ink = uniform(rng, 0.85, 1.0);
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);

  std::vector<Polyline> strokes = toy_glyph(label);
  for (Polyline& line : strokes) {
    for (Point2& p : line) {
      const double u = (p.x - 0.5) + shear * (p.y - 0.5);
      const double v = p.y - 0.5;
      p = {cx + scale * (ca * u - sa * v), cy + scale * (sa * u + ca * v)};
    }
  }
  std::vector<double> img(H * W, 0.0);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const Point2 p{static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5};
      double d = 1e9;
      for (const Polyline& line : strokes) {
        for (std::size_t i = 0; i + 1 < line.size(); ++i) {
          d = std::min(d, toy_detail::segment_distance(p, line[i], line[i + 1]));
        }
      }
      // soft 3 px edge centred on the stroke radius
      const double v = std::clamp((radius + 1.5 - d) / 3.0, 0.0, 1.0);
      img[r * W + c] = v > 0 ? ink * v : 0.0;
    }
  }
  return img;
}

// Balanced classes in shuffled order.
inline std::vector<ToySample> make_toy_dataset(std::size_t count, std::uint64_t seed,
                                               std::size_t H = 28, std::size_t W = 28,
                                               int classes = 10) {
  Rng rng(seed);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % classes);
  shuffle(labels, rng);
  std::vector<ToySample> out;
  out.reserve(count);
  for (int label : labels) out.push_back({render_toy_glyph(label, H, W, rng), label});
  return out;
}

}  // namespace scae
