#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "maskcd/io/png.hpp"
#include "maskcd/tensor.hpp"

namespace maskcd::io {

namespace fs = std::filesystem;

/// One co-registered pair with its binary change label (1 = changed).
struct Sample {
  std::string name;
  std::size_t height = 0, width = 0;
  Tensor t1, t2;  // [3, H, W] in [0, 1]
  std::vector<std::uint8_t> label;
};

struct TileItem {
  std::string name;
  fs::path t1, t2, label;
};

struct TileDataset {
  fs::path root;
  std::string split;
  std::vector<TileItem> items;
  std::size_t size() const { return items.size(); }
};

inline Tensor image_to_tensor(const Image8& img) {
  const std::size_t hw = img.width * img.height;
  std::vector<double> out(img.channels * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < img.channels; ++c) out[c * hw + p] = img.pixels[p * img.channels + c] / 255.0;
  return Tensor(Shape{img.channels, img.height, img.width}, std::move(out));
}

inline Image8 tensor_to_image(const Tensor& t) {
  Image8 img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  const std::size_t hw = img.width * img.height;
  img.pixels.resize(img.channels * hw);
  const auto v = t.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < img.channels; ++c) {
      img.pixels[p * img.channels + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v[c * hw + p], 0.0, 1.0) * 255.0));
    }
  return img;
}

/// Maps a grayscale label to {0,1}. Strict mode rejects anything but 0/255;
/// lenient mode thresholds at 128 and warns once.
inline std::vector<std::uint8_t> binarize_label(const Image8& img, const std::string& path, bool strict) {
  std::vector<std::uint8_t> out(img.pixels.size());
  bool warned = false;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::uint8_t v = img.pixels[k];
    if (v != 0 && v != 255) {
      if (strict) {
        throw InputError("label '" + path + "' has value " + std::to_string(v) + " at pixel (" + std::to_string(k % img.width) + ", " +
                         std::to_string(k / img.width) + "); expected 0 or 255");
      }
      if (!warned) {
        std::cerr << "warning: label '" << path << "' is not strictly 0/255; thresholding at 128\n";
        warned = true;
      }
    }
    out[k] = v >= 128 ? 1 : 0;
  }
  return out;
}

/// Layout: <root>/<split>/{A,B,label}/<name>.png with identical basenames.
inline TileDataset load_tile_dataset(const fs::path& root, const std::string& split) {
  const fs::path base = root / split;
  if (!fs::is_directory(base)) throw InputError("dataset split directory '" + base.string() + "' does not exist");
  TileDataset ds;
  ds.root = root;
  ds.split = split;
  const char* subdirs[] = {"A", "B", "label"};
  for (const char* sub : subdirs) {
    if (!fs::is_directory(base / sub)) throw InputError("dataset split '" + base.string() + "' lacks the '" + sub + "' folder");
  }
  std::vector<std::string> names;
  for (const char* sub : subdirs) {
    for (const auto& e : fs::directory_iterator(base / sub)) {
      if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  for (const auto& n : names) {
    TileItem item{fs::path(n).stem().string(), base / "A" / n, base / "B" / n, base / "label" / n};
    for (const auto& p : {item.t1, item.t2, item.label}) {
      if (!fs::exists(p)) throw InputError("missing counterpart file '" + p.string() + "'");
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

inline Sample load_sample(const TileItem& item, bool strict_labels = true) {
  const Image8 a = read_png(item.t1.string(), 3);
  const Image8 b = read_png(item.t2.string(), 3);
  const Image8 l = read_png(item.label.string(), 1);
  auto dims = [](const Image8& i) { return std::to_string(i.width) + "x" + std::to_string(i.height); };
  if (a.width != b.width || a.height != b.height || a.width != l.width || a.height != l.height) {
    throw InputError("tile '" + item.name + "' has mismatched sizes: A " + dims(a) + ", B " + dims(b) + ", label " + dims(l));
  }
  Sample s;
  s.name = item.name;
  s.height = a.height;
  s.width = a.width;
  s.t1 = image_to_tensor(a);
  s.t2 = image_to_tensor(b);
  s.label = binarize_label(l, item.label.string(), strict_labels);
  return s;
}

inline std::vector<Sample> load_samples(const TileDataset& ds, bool strict_labels = true) {
  std::vector<Sample> out;
  for (const auto& item : ds.items) out.push_back(load_sample(item, strict_labels));
  return out;
}

inline Image8 label_to_image(const std::vector<std::uint8_t>& label, std::size_t height, std::size_t width) {
  Image8 img{width, height, 1, std::vector<std::uint8_t>(label.size())};
  for (std::size_t k = 0; k < label.size(); ++k) img.pixels[k] = label[k] ? 255 : 0;
  return img;
}

/// Writes a split in the layout read by load_tile_dataset.
inline void write_tile_dataset(const fs::path& root, const std::string& split, const std::vector<Sample>& samples) {
  const fs::path base = root / split;
  for (const char* sub : {"A", "B", "label"}) fs::create_directories(base / sub);
  for (const auto& s : samples) {
    const std::string file = s.name + ".png";
    write_png((base / "A" / file).string(), tensor_to_image(s.t1));
    write_png((base / "B" / file).string(), tensor_to_image(s.t2));
    write_png((base / "label" / file).string(), label_to_image(s.label, s.height, s.width));
  }
}

}  // namespace maskcd::io
