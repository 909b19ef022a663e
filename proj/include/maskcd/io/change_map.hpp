#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maskcd/io/png.hpp"
#include "maskcd/mask_head.hpp"

namespace maskcd::io {

inline constexpr std::array<std::uint8_t, 3> kTruePositive{0, 255, 0};
inline constexpr std::array<std::uint8_t, 3> kTrueNegative{255, 255, 255};
inline constexpr std::array<std::uint8_t, 3> kFalsePositive{255, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kFalseNegative{0, 0, 255};

/// Grayscale (changed = 255) without a reference label; with one, the
/// TP/TN/FP/FN colour rendering.
inline Image8 render_change_map(const ChangeMap& map, const std::optional<std::vector<std::uint8_t>>& gt = std::nullopt) {
  const std::size_t n = map.height * map.width;
  if (!gt) {
    Image8 img{map.width, map.height, 1, std::vector<std::uint8_t>(n)};
    for (std::size_t k = 0; k < n; ++k) img.pixels[k] = map.labels[k] ? 255 : 0;
    return img;
  }
  if (gt->size() != n) throw InputError("overlay label has " + std::to_string(gt->size()) + " pixels, change map has " + std::to_string(n));
  Image8 img{map.width, map.height, 3, std::vector<std::uint8_t>(3 * n)};
  for (std::size_t k = 0; k < n; ++k) {
    const bool p = map.labels[k] != 0, g = (*gt)[k] != 0;
    const auto& c = p ? (g ? kTruePositive : kFalsePositive) : (g ? kFalseNegative : kTrueNegative);
    for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[3 * k + ch] = c[ch];
  }
  return img;
}

inline void write_change_map(const ChangeMap& map, const std::optional<std::vector<std::uint8_t>>& gt, const std::string& path) {
  write_png(path, render_change_map(map, gt));
}

}  // namespace maskcd::io
