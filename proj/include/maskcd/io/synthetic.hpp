#pragma once

// Procedural bitemporal scenes: a smooth background shared by both dates,
// with rectangles and ellipses that persist, disappear, or appear.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "maskcd/io/dataset.hpp"
#include "maskcd/parameter.hpp"

namespace maskcd::io {

enum class ShapeKind { Rectangle, Ellipse };
enum class ShapeFate { Static, Removed, Added };

/// Bounding box [x0, x1) x [y0, y1); corners lie on the 4-pixel grid.
struct SceneShape {
  ShapeKind kind = ShapeKind::Rectangle;
  ShapeFate fate = ShapeFate::Static;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::array<double, 3> color{};

  bool covers(std::size_t x, std::size_t y) const {
    if (x < x0 || x >= x1 || y < y0 || y >= y1) return false;
    if (kind == ShapeKind::Rectangle) return true;
    const double cx = 0.5 * static_cast<double>(x0 + x1), cy = 0.5 * static_cast<double>(y0 + y1);
    const double rx = 0.5 * static_cast<double>(x1 - x0), ry = 0.5 * static_cast<double>(y1 - y0);
    const double dx = (static_cast<double>(x) + 0.5 - cx) / rx, dy = (static_cast<double>(y) + 0.5 - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

struct SyntheticOptions {
  double ellipse_fraction = 0.5;
  double noise_sigma = 0.02;
};

struct SyntheticPair {
  Sample sample;
  std::vector<SceneShape> shapes;
};

inline SyntheticPair generate_synthetic_pair(std::uint64_t seed, std::size_t size, std::size_t n_shapes, const SyntheticOptions& opt = {}) {
  if (size < 16) throw ConfigError("synthetic tile size " + std::to_string(size) + " is below the minimum of 16");
  if (size % 4 != 0) throw ConfigError("synthetic tile size " + std::to_string(size) + " must be a multiple of 4");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  // Background: a few low-frequency waves per channel around a base tone.
  const std::size_t hw = size * size;
  std::vector<double> background(3 * hw);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = 0.3 + 0.4 * unit(rng);
    struct Wave { double fx, fy, phase, amp; };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k) waves.push_back({unit(rng) * 2.0, unit(rng) * 2.0, unit(rng) * two_pi, 0.03 + 0.05 * unit(rng)});
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double v = base;
        for (const auto& w : waves) {
          v += w.amp * std::sin(two_pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) / static_cast<double>(size) + w.phase);
        }
        background[c * hw + y * size + x] = v;
      }
  }

  // Non-overlapping shapes with at least one grid cell of clearance.
  std::vector<SceneShape> shapes;
  const std::size_t cells = size / 4;
  const std::size_t max_side = std::max<std::size_t>(2, cells / 3);
  std::uniform_int_distribution<std::size_t> side(2, max_side);
  for (std::size_t s = 0; s < n_shapes; ++s) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const std::size_t w = side(rng), h = side(rng);
      const std::size_t cx = std::uniform_int_distribution<std::size_t>(0, cells - w)(rng);
      const std::size_t cy = std::uniform_int_distribution<std::size_t>(0, cells - h)(rng);
      SceneShape sh;
      sh.x0 = cx * 4;
      sh.y0 = cy * 4;
      sh.x1 = (cx + w) * 4;
      sh.y1 = (cy + h) * 4;
      bool clear = true;
      for (const auto& o : shapes) {
        if (sh.x0 < o.x1 + 4 && o.x0 < sh.x1 + 4 && sh.y0 < o.y1 + 4 && o.y0 < sh.y1 + 4) clear = false;
      }
      if (!clear) continue;
      sh.kind = unit(rng) < opt.ellipse_fraction ? ShapeKind::Ellipse : ShapeKind::Rectangle;
      sh.fate = static_cast<ShapeFate>(std::uniform_int_distribution<int>(0, 2)(rng));
      for (auto& c : sh.color) c = unit(rng);
      shapes.push_back(sh);
      break;
    }
  }

  std::vector<double> t1 = background, t2 = background;
  std::vector<std::uint8_t> label(hw, 0);
  for (const auto& sh : shapes) {
    for (std::size_t y = sh.y0; y < sh.y1; ++y)
      for (std::size_t x = sh.x0; x < sh.x1; ++x) {
        if (!sh.covers(x, y)) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          if (sh.fate != ShapeFate::Added) t1[c * hw + y * size + x] = sh.color[c];
          if (sh.fate != ShapeFate::Removed) t2[c * hw + y * size + x] = sh.color[c];
        }
        if (sh.fate != ShapeFate::Static) label[y * size + x] = 1;
      }
  }
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  for (auto& v : t2) v += noise(rng);
  for (auto& v : t1) v = std::clamp(v, 0.0, 1.0);
  for (auto& v : t2) v = std::clamp(v, 0.0, 1.0);

  SyntheticPair out;
  out.shapes = std::move(shapes);
  out.sample.name = "synth_" + std::to_string(seed);
  out.sample.height = out.sample.width = size;
  out.sample.t1 = Tensor(Shape{3, size, size}, std::move(t1));
  out.sample.t2 = Tensor(Shape{3, size, size}, std::move(t2));
  out.sample.label = std::move(label);
  return out;
}

/// `count` pairs with seeds derived from `seed`.
inline std::vector<Sample> synthetic_split(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_shapes,
                                           const SyntheticOptions& opt = {}) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticPair p = generate_synthetic_pair(seed * 1000003ULL + i, size, n_shapes, opt);
    p.sample.name = "synth_" + std::to_string(i);
    out.push_back(std::move(p.sample));
  }
  return out;
}

}  // namespace maskcd::io
