#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "maskcd/errors.hpp"

namespace maskcd::io {

/// 8-bit interleaved image.
struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Reads any PNG, converting to `channels` (1 = gray, 3 = RGB).
inline Image8 read_png(const std::string& path, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG '" + path + "': " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path + "': " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw UsageError("write_png: unsupported channel count " + std::to_string(image.channels));
  if (image.pixels.size() != image.width * image.height * image.channels) throw DimensionError("write_png: pixel buffer size mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path + "': " + img.message);
  }
}

}  // namespace maskcd::io
