#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "../support/gradcheck.hpp"
#include "maskcd/encoder.hpp"
#include "maskcd/positional_encoding.hpp"

using namespace maskcd;
using maskcd::testing::check_gradients;
using maskcd::testing::check_parameter_gradients;
using maskcd::testing::random_tensor;

namespace {

void zero(Tensor t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.embed_dim = 8;
  c.heads = {1, 2, 2, 4};
  return c;
}

}  // namespace

TEST(WindowLayout, EffectiveWindowDividesGrid) {
  EXPECT_EQ(WindowLayout::effective_window(16, 16, 4), 4u);
  EXPECT_EQ(WindowLayout::effective_window(2, 2, 4), 2u);
  EXPECT_EQ(WindowLayout::effective_window(1, 1, 4), 1u);
  EXPECT_EQ(WindowLayout::effective_window(6, 9, 4), 3u);
  EXPECT_EQ(WindowLayout::effective_window(4, 8, 7), 4u);
}

TEST(WindowLayout, PermutationsAreInverseAndWindowsAreContiguousBlocks) {
  for (bool shifted : {false, true}) {
    const WindowLayout L = WindowLayout::build(8, 12, 4, shifted);
    EXPECT_EQ(L.num_windows, 6u);
    EXPECT_EQ(L.shift, shifted ? 2u : 0u);
    const auto& fwd = *L.to_windows;
    const auto& inv = *L.from_windows;
    for (std::size_t r = 0; r < fwd.size(); ++r) EXPECT_EQ(inv[fwd[r]], static_cast<std::int64_t>(r));
    for (std::size_t w = 0; w < L.num_windows; ++w) {
      std::set<std::pair<std::size_t, std::size_t>> rows_cols;
      for (std::size_t t = 0; t < 16; ++t) {
        const std::size_t g = fwd[w * 16 + t];
        // Undo the cyclic shift: shifted coordinates must tile an aligned 4x4 block.
        const std::size_t y = (g / 12 + 8 - L.shift) % 8, x = (g % 12 + 12 - L.shift) % 12;
        rows_cols.insert({y / 4, x / 4});
      }
      EXPECT_EQ(rows_cols.size(), 1u) << "window " << w;
    }
  }
}

TEST(WindowLayout, NoShiftWhenWindowCoversGrid) {
  const WindowLayout L = WindowLayout::build(4, 4, 4, true);
  EXPECT_EQ(L.shift, 0u);
  EXPECT_FALSE(L.shift_mask.defined());
}

TEST(WindowLayout, ShiftMaskBlocksExactlyWrappedPairs) {
  const std::size_t H = 8, W = 8;
  const WindowLayout L = WindowLayout::build(H, W, 4, true);
  ASSERT_TRUE(L.shift_mask.defined());
  const std::size_t T = 16;
  ASSERT_EQ(L.shift_mask.shape(), (Shape{4, 1, T, T}));
  const auto& fwd = *L.to_windows;
  // Oracle: a token wrapped around along an axis iff its original coordinate is
  // smaller than the shift. Two tokens may attend iff they agree on both axes.
  auto wrapped = [&](std::int64_t g) { return std::pair<bool, bool>{g / W < L.shift, g % W < L.shift}; };
  for (std::size_t w = 0; w < L.num_windows; ++w)
    for (std::size_t p = 0; p < T; ++p)
      for (std::size_t q = 0; q < T; ++q) {
        const bool allowed = wrapped(fwd[w * T + p]) == wrapped(fwd[w * T + q]);
        const double m = L.shift_mask.at((w * T + p) * T + q);
        EXPECT_EQ(m == 0.0, allowed) << w << " " << p << " " << q;
        if (!allowed) EXPECT_TRUE(std::isinf(m) && m < 0);
      }
}

TEST(Encoder, LevelShapesAt64) {
  Rng rng(1);
  ParameterStore store;
  const Encoder enc(store, EncoderConfig{}, rng);
  const auto levels = enc(random_tensor({3, 64, 64}, rng, 0, 1));
  ASSERT_EQ(levels.size(), 4u);
  EXPECT_EQ(levels[0].shape(), (Shape{32, 16, 16}));
  EXPECT_EQ(levels[1].shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(levels[2].shape(), (Shape{128, 4, 4}));
  EXPECT_EQ(levels[3].shape(), (Shape{256, 2, 2}));
}

TEST(Encoder, SmallestInputStillRunsEveryStage) {
  Rng rng(2);
  ParameterStore store;
  const Encoder enc(store, small_encoder(), rng);
  const auto levels = enc(random_tensor({3, 16, 16}, rng, 0, 1));
  EXPECT_EQ(levels[0].shape(), (Shape{8, 4, 4}));
  EXPECT_EQ(levels[1].shape(), (Shape{16, 2, 2}));
  EXPECT_EQ(levels[2].shape(), (Shape{32, 1, 1}));
  EXPECT_EQ(levels[3].shape(), (Shape{64, 1, 1}));
  for (const auto& l : levels)
    for (double v : l.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encoder, RejectsIndivisibleAndMismatchedInputs) {
  Rng rng(3);
  ParameterStore store;
  const Encoder enc(store, small_encoder(), rng);
  EXPECT_THROW(enc(Tensor(Shape{3, 18, 16})), InputError);
  EXPECT_THROW(enc.siamese(Tensor(Shape{3, 16, 16}), Tensor(Shape{3, 16, 20})), InputError);
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c = small_encoder();
  c.depths = {2, 3, 2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_encoder();
  c.heads = {3, 2, 2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, SiameseSharesWeightsAndConcatenatesChannels) {
  Rng rng(4);
  ParameterStore store;
  const Encoder enc(store, small_encoder(), rng);
  const Tensor a = random_tensor({3, 16, 16}, rng, 0, 1), b = random_tensor({3, 16, 16}, rng, 0, 1);
  const auto f = enc.siamese(a, b);
  const auto la = enc(a), lb = enc(b);
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t C = la[l].dim(0), n = la[l].size();
    ASSERT_EQ(f.delta[l].dim(0), 2 * C);
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_EQ(f.delta[l].at(k), la[l].at(k));
      EXPECT_EQ(f.delta[l].at(n + k), lb[l].at(k));
    }
  }
}

TEST(SwinBlock, ZeroResidualBranchesGiveIdentity) {
  Rng rng(5);
  ParameterStore store;
  const SwinStage stage(store, "s", 8, 2, 2, 4, 4, false, rng);
  for (const auto& b : stage.blocks) {
    zero(b.attn.proj.weight);
    zero(b.attn.proj.bias);
    zero(b.mlp.layers.back().weight);
    zero(b.mlp.layers.back().bias);
  }
  const Tensor x = random_tensor({64, 8}, rng);
  const StageOutput out = stage(x, 8, 8);
  EXPECT_EQ(out.level.values(), tokens_to_map(x, 8, 8).values());
}

TEST(SwinBlock, RegularBlockIsEquivariantToWindowAlignedRolls) {
  // Rolling the grid by a whole window only permutes windows.
  Rng rng(6);
  ParameterStore store;
  const SwinStage stage(store, "s", 8, 2, 2, 2, 4, false, rng);
  const std::size_t H = 4, W = 4;
  const WindowLayout regular = WindowLayout::build(H, W, 2, false);
  const Tensor x = random_tensor({H * W, 8}, rng);
  std::vector<std::int64_t> roll(H * W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) roll[i * W + j] = static_cast<std::int64_t>(i * W + (j + 2) % W);
  const Tensor expect = gather_rows(stage.blocks[0](x, regular), roll);
  const Tensor got = stage.blocks[0](gather_rows(x, roll), regular);
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got.at(k), expect.at(k), 1e-12);
}

TEST(SwinStage, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  ParameterStore store;
  const SwinStage stage(store, "s", 8, 2, 2, 2, 4, true, rng);
  const Tensor x = random_tensor({16, 8}, rng);
  const auto r = check_parameter_gradients(store, [&] { return add(sum(stage(x, 4, 4).level), sum(stage(x, 4, 4).next)); }, rng, 3);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  const auto ri = check_gradients([&](const auto& in) { return stage(in[0], 4, 4).level; }, {x}, rng);
  EXPECT_LT(ri.max_rel_error, 1e-5) << ri.worst;
}

TEST(PatchEmbed, GathersNonOverlappingPatches) {
  Rng rng(8);
  ParameterStore store;
  const PatchEmbed pe(store, "pe", 3, 5, 4, rng);
  const Tensor img = random_tensor({3, 8, 12}, rng);
  const Tensor t = pe(img);
  ASSERT_EQ(t.shape(), (Shape{6, 5}));
  // Token (1, 2) from an explicit flattening of its patch.
  std::vector<double> patch;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) patch.push_back(img.at((c * 8 + 4 + a) * 12 + 8 + b));
  const Tensor ref = pe.proj(Tensor(Shape{1, 48}, patch));
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(t.at(5 * 5 + c), ref.at(c), 1e-12);
}

TEST(PatchMerging, ZeroPadsOddGrids) {
  Rng rng(9);
  ParameterStore store;
  const PatchMerging m(store, "m", 4, rng);
  const Tensor x = random_tensor({3 * 3, 4}, rng);
  EXPECT_EQ(m(x, 3, 3).shape(), (Shape{4, 8}));
}

TEST(PositionalEncoding, MatchesClosedFormAndSeparatesPositions) {
  const Tensor pe = positional_encoding(4, 6, 8);
  ASSERT_EQ(pe.shape(), (Shape{8, 4, 6}));
  const double two_pi = 2 * std::acos(-1.0);
  // Column code, channel 3 = sin(phi_x / 10000^(2/4)).
  const double phi_x = (2 + 0.5) / 6 * two_pi, phi_y = (1 + 0.5) / 4 * two_pi;
  EXPECT_NEAR(pe.at((3 * 4 + 1) * 6 + 2), std::sin(phi_x / 100.0), 1e-15);
  EXPECT_NEAR(pe.at((4 * 4 + 1) * 6 + 2), std::cos(phi_y), 1e-15);
  std::set<std::vector<double>> codes;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      std::vector<double> v;
      for (std::size_t c = 0; c < 8; ++c) v.push_back(pe.at((c * 4 + i) * 6 + j));
      codes.insert(v);
    }
  EXPECT_EQ(codes.size(), 24u);
  EXPECT_THROW(positional_encoding(2, 2, 6), ConfigError);
}
