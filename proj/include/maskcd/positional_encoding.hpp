#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "maskcd/tensor.hpp"

namespace maskcd {

/// One-axis sinusoidal code with `channels` entries: channel 2i holds
/// cos(phi / 10000^(2i / channels)) and channel 2i+1 the matching sin.
inline std::vector<double> sine_encoding(double phi, std::size_t channels) {
  std::vector<double> out(channels);
  for (std::size_t i = 0; 2 * i < channels; ++i) {
    const double divisor = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(channels));
    out[2 * i] = std::cos(phi / divisor);
    if (2 * i + 1 < channels) out[2 * i + 1] = std::sin(phi / divisor);
  }
  return out;
}

/// 2-D encoding [d, H, W]: the first d/2 channels encode the column, the last
/// d/2 the row. Coordinates are normalized into (0, 2*pi) at pixel centers.
inline Tensor positional_encoding(std::size_t height, std::size_t width, std::size_t d) {
  if (d == 0 || d % 4 != 0) throw ConfigError("positional encoding width " + std::to_string(d) + " must be divisible by 4");
  const std::size_t half = d / 2;
  std::vector<double> out(d * height * width);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < height; ++i) {
    const auto ey = sine_encoding((static_cast<double>(i) + 0.5) / static_cast<double>(height) * two_pi, half);
    for (std::size_t j = 0; j < width; ++j) {
      const auto ex = sine_encoding((static_cast<double>(j) + 0.5) / static_cast<double>(width) * two_pi, half);
      for (std::size_t c = 0; c < half; ++c) {
        out[(c * height + i) * width + j] = ex[c];
        out[((half + c) * height + i) * width + j] = ey[c];
      }
    }
  }
  return Tensor(Shape{d, height, width}, std::move(out));
}

}  // namespace maskcd
