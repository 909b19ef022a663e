#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "maskcd/io/change_map.hpp"
#include "maskcd/io/checkpoint.hpp"
#include "maskcd/io/dataset.hpp"
#include "maskcd/io/synthetic.hpp"

using namespace maskcd;
using namespace maskcd::io;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("maskcd_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "<no exception>";
}

}  // namespace

using DatasetIo = TempDir;
using CheckpointIo = TempDir;
using ChangeMapIo = TempDir;

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic_pair(42, 64, 4), b = generate_synthetic_pair(42, 64, 4), c = generate_synthetic_pair(43, 64, 4);
  EXPECT_EQ(a.sample.t1.values(), b.sample.t1.values());
  EXPECT_EQ(a.sample.t2.values(), b.sample.t2.values());
  EXPECT_EQ(a.sample.label, b.sample.label);
  EXPECT_NE(a.sample.t1.values(), c.sample.t1.values());
  const auto s1 = synthetic_split(7, 3, 32, 3), s2 = synthetic_split(7, 3, 32, 3);
  ASSERT_EQ(s1.size(), 3u);
  EXPECT_EQ(s1[2].name, "synth_2");
  EXPECT_EQ(s1[2].label, s2[2].label);
}

TEST(Synthetic, LabelMatchesIndependentRasterizer) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticPair p = generate_synthetic_pair(seed, 64, 5);
    std::vector<std::uint8_t> expect(64 * 64, 0);
    for (const auto& s : p.shapes) {
      EXPECT_EQ(s.x0 % 4, 0u);
      EXPECT_EQ(s.y1 % 4, 0u);
      if (s.fate == ShapeFate::Static) continue;
      // Ellipse membership from the implicit equation at pixel centres.
      const double cx = (s.x0 + s.x1) / 2.0, cy = (s.y0 + s.y1) / 2.0, rx = (s.x1 - s.x0) / 2.0, ry = (s.y1 - s.y0) / 2.0;
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          const bool in_box = x >= s.x0 && x < s.x1 && y >= s.y0 && y < s.y1;
          const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
          if (in_box && (s.kind == ShapeKind::Rectangle || u * u + v * v <= 1.0)) expect[y * 64 + x] = 1;
        }
    }
    EXPECT_EQ(p.sample.label, expect) << seed;
  }
}

TEST(Synthetic, ChangedPixelsDifferBetweenDates) {
  const SyntheticPair p = generate_synthetic_pair(5, 64, 6, SyntheticOptions{0.5, 0.0});
  const std::size_t hw = 64 * 64;
  for (std::size_t k = 0; k < hw; ++k) {
    bool same = true;
    for (std::size_t c = 0; c < 3; ++c) same = same && p.sample.t1.at(c * hw + k) == p.sample.t2.at(c * hw + k);
    if (!p.sample.label[k]) EXPECT_TRUE(same) << k;
  }
}

TEST(Synthetic, RejectsBadSizes) {
  EXPECT_THROW(generate_synthetic_pair(1, 12, 2), ConfigError);
  EXPECT_THROW(generate_synthetic_pair(1, 30, 2), ConfigError);
}

TEST_F(DatasetIo, RoundTripThroughPngFolders) {
  const auto samples = synthetic_split(3, 2, 32, 3);
  write_tile_dataset(dir_, "train", samples);
  const TileDataset ds = load_tile_dataset(dir_, "train");
  ASSERT_EQ(ds.items.size(), 2u);
  const auto loaded = load_samples(ds);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded[i].label, samples[i].label);
    // 8-bit quantization bounds the image error.
    for (std::size_t k = 0; k < samples[i].t1.size(); ++k) EXPECT_NEAR(loaded[i].t1.at(k), samples[i].t1.at(k), 0.5 / 255 + 1e-12);
  }
}

TEST_F(DatasetIo, ErrorsNameTheOffendingPath) {
  EXPECT_NE(message_of<InputError>([&] { load_tile_dataset(dir_, "val"); }).find("val"), std::string::npos);
  fs::create_directories(dir_ / "x" / "A");
  fs::create_directories(dir_ / "x" / "B");
  EXPECT_NE(message_of<InputError>([&] { load_tile_dataset(dir_, "x"); }).find("'label'"), std::string::npos);

  write_tile_dataset(dir_, "t", synthetic_split(1, 1, 16, 1));
  fs::remove(dir_ / "t" / "B" / "synth_0.png");
  EXPECT_NE(message_of<InputError>([&] { load_tile_dataset(dir_, "t"); }).find("synth_0.png"), std::string::npos);
}

TEST_F(DatasetIo, MismatchedSizesAreRejected) {
  write_tile_dataset(dir_, "t", synthetic_split(1, 1, 16, 1));
  write_png((dir_ / "t" / "label" / "synth_0.png").string(), label_to_image(std::vector<std::uint8_t>(20 * 20, 0), 20, 20));
  const TileDataset ds = load_tile_dataset(dir_, "t");
  const std::string msg = message_of<InputError>([&] { load_sample(ds.items[0]); });
  EXPECT_NE(msg.find("20x20"), std::string::npos) << msg;
  EXPECT_NE(msg.find("16x16"), std::string::npos) << msg;
}

TEST_F(DatasetIo, NonBinaryLabelsStrictAndLenient) {
  Image8 lbl{2, 1, 1, {0, 200}};
  EXPECT_THROW(binarize_label(lbl, "l.png", true), InputError);
  EXPECT_EQ(binarize_label(lbl, "l.png", false), (std::vector<std::uint8_t>{0, 1}));
  lbl.pixels = {127, 255};
  EXPECT_EQ(binarize_label(lbl, "l.png", false), (std::vector<std::uint8_t>{0, 1}));
}

TEST_F(DatasetIo, CorruptPngIsReported) {
  write_bytes(dir_ / "bad.png", "not a png");
  EXPECT_THROW(read_png((dir_ / "bad.png").string(), 3), Error);
}

TEST_F(CheckpointIo, RoundTripRestoresValuesAndMoments) {
  Rng rng(1);
  ParameterStore a;
  Tensor w = a.create("w", Shape{2, 3}, Init::Normal002, rng);
  a.create("b", Shape{3}, Init::Zeros, rng);
  w.mutable_grad().assign(6, 0.5);
  adam_step(a, 0.01);
  save_checkpoint(dir_ / "c.mkcd", a, {{"step", 7}});
  EXPECT_FALSE(fs::exists(dir_ / "c.mkcd.tmp"));

  ParameterStore b;
  Rng other(2);
  b.create("w", Shape{2, 3}, Init::Normal002, other);
  b.create("b", Shape{3}, Init::Zeros, other);
  const CheckpointData ck = load_checkpoint(dir_ / "c.mkcd");
  EXPECT_EQ(ck.meta.at("step"), 7);
  restore_parameters(b, ck);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values());
    EXPECT_EQ(a[i].adam.m, b[i].adam.m);
    EXPECT_EQ(a[i].adam.v, b[i].adam.v);
    EXPECT_EQ(a[i].adam.step, b[i].adam.step);
  }
  // Byte-identical re-save.
  save_checkpoint(dir_ / "d.mkcd", b, {{"step", 7}});
  EXPECT_EQ(read_bytes(dir_ / "c.mkcd"), read_bytes(dir_ / "d.mkcd"));
}

TEST_F(CheckpointIo, TruncationTrailingBytesAndVersion) {
  Rng rng(3);
  ParameterStore a;
  a.create("w", Shape{4}, Init::Ones, rng);
  save_checkpoint(dir_ / "c.mkcd", a, nlohmann::json::object());
  const std::string bytes = read_bytes(dir_ / "c.mkcd");

  write_bytes(dir_ / "t.mkcd", bytes.substr(0, bytes.size() - 5));
  EXPECT_NE(message_of<ParseError>([&] { load_checkpoint(dir_ / "t.mkcd"); }).find("truncated"), std::string::npos);

  write_bytes(dir_ / "x.mkcd", bytes + "zz");
  EXPECT_THROW(load_checkpoint(dir_ / "x.mkcd"), ParseError);

  std::string v2 = bytes;
  v2[4] = 2;
  write_bytes(dir_ / "v.mkcd", v2);
  const std::string msg = message_of<ConfigError>([&] { load_checkpoint(dir_ / "v.mkcd"); });
  EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("version 1"), std::string::npos) << msg;

  write_bytes(dir_ / "m.mkcd", "JUNK" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(dir_ / "m.mkcd"), ParseError);
  EXPECT_THROW(load_checkpoint(dir_ / "missing.mkcd"), IoError);
}

TEST_F(CheckpointIo, ShapeMismatchIsAConfigError) {
  Rng rng(4);
  ParameterStore a, b;
  a.create("w", Shape{4}, Init::Ones, rng);
  b.create("w", Shape{5}, Init::Ones, rng);
  save_checkpoint(dir_ / "c.mkcd", a, nlohmann::json::object());
  EXPECT_THROW(restore_parameters(b, load_checkpoint(dir_ / "c.mkcd")), ConfigError);
}

TEST_F(ChangeMapIo, FourColourOverlay) {
  ChangeMap m;
  m.height = 1;
  m.width = 4;
  m.labels = {1, 1, 0, 0};
  const Image8 img = render_change_map(m, std::vector<std::uint8_t>{1, 0, 1, 0});
  ASSERT_EQ(img.channels, 3u);
  const std::array<std::array<std::uint8_t, 3>, 4> expect{kTruePositive, kFalsePositive, kFalseNegative, kTrueNegative};
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.pixels[3 * k + c], expect[k][c]);
  const Image8 gray = render_change_map(m);
  EXPECT_EQ(gray.pixels, (std::vector<std::uint8_t>{255, 255, 0, 0}));
  write_change_map(m, std::nullopt, (dir_ / "m.png").string());
  EXPECT_EQ(read_png((dir_ / "m.png").string(), 1).pixels, gray.pixels);
  EXPECT_THROW(render_change_map(m, std::vector<std::uint8_t>{1}), InputError);
}
