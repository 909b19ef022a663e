#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "../support/gradcheck.hpp"
#include "maskcd/clcrp.hpp"

using namespace maskcd;
using maskcd::testing::check_gradients;
using maskcd::testing::check_parameter_gradients;
using maskcd::testing::random_tensor;

namespace {

void fill_random(Tensor t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.mutable_data()) v = u(rng);
}

// y = x W + b for one row, W stored [in, out].
std::vector<double> linear_row(const Linear& l, const double* x) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias.defined() ? l.bias.at(o) : 0.0;
    for (std::size_t i = 0; i < in; ++i) s += x[i] * l.weight.at(i * out + o);
    y[o] = s;
  }
  return y;
}

// Scalar-loop reference for multi-scale deformable attention.
std::vector<double> deform_oracle(const DeformableAttention& a, const Tensor& query, const Tensor& input, const std::vector<Tensor>& refs,
                                  const std::vector<LevelSpan>& spans) {
  const std::size_t S = query.dim(0), d = a.dim, M = a.heads, L = a.levels, K = a.points, dh = d / M;
  std::vector<std::vector<double>> value;
  for (std::size_t r = 0; r < input.dim(0); ++r) value.push_back(linear_row(a.value_proj, input.data().data() + r * d));
  std::vector<double> out(S * d);
  for (std::size_t q = 0; q < S; ++q) {
    const auto off = linear_row(a.offset_proj, query.data().data() + q * d);
    const auto logit = linear_row(a.weight_proj, query.data().data() + q * d);
    std::vector<double> agg(d, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      double mx = -1e300, z = 0;
      for (std::size_t t = 0; t < L * K; ++t) mx = std::max(mx, logit[m * L * K + t]);
      for (std::size_t t = 0; t < L * K; ++t) z += std::exp(logit[m * L * K + t] - mx);
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t k = 0; k < K; ++k) {
          const double w = std::exp(logit[(m * L + l) * K + k] - mx) / z;
          const double x = refs[l].at(2 * q) + off[((m * L + l) * K + k) * 2];
          const double y = refs[l].at(2 * q + 1) + off[((m * L + l) * K + k) * 2 + 1];
          const double fx = std::floor(x), fy = std::floor(y);
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double px = fx + dx, py = fy + dy;
              if (px < 0 || py < 0 || px >= static_cast<double>(spans[l].width) || py >= static_cast<double>(spans[l].height)) continue;
              const double bw = (1 - std::abs(x - px)) * (1 - std::abs(y - py));
              const std::size_t row = spans[l].offset + static_cast<std::size_t>(py) * spans[l].width + static_cast<std::size_t>(px);
              for (std::size_t c = 0; c < dh; ++c) agg[m * dh + c] += w * bw * value[row][m * dh + c];
            }
        }
    }
    const auto o = linear_row(a.output_proj, agg.data());
    std::copy(o.begin(), o.end(), out.begin() + q * d);
  }
  return out;
}

std::vector<LevelSpan> spans_for(std::initializer_list<std::pair<std::size_t, std::size_t>> hw) {
  std::vector<LevelSpan> s;
  std::size_t off = 0;
  for (auto [h, w] : hw) {
    s.push_back({off, h, w});
    off += h * w;
  }
  return s;
}

std::vector<Tensor> delta_levels(Rng& rng, std::size_t size, std::size_t c1) {
  std::vector<Tensor> d;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t h = std::max<std::size_t>(1, size / 4 >> l);
    d.push_back(random_tensor({2 * (c1 << l), h, h}, rng));
  }
  return d;
}

}  // namespace

TEST(Clcrp, SequenceLengthForSixtyFourPixelTiles) {
  Rng rng(1);
  ParameterStore store;
  const Clcrp c(store, ClcrpConfig{}, {64, 128, 256, 512}, rng);
  const ProjectedLevels p = c.project_levels(delta_levels(rng, 64, 32));
  EXPECT_EQ(p.residual.shape(), (Shape{64, 16, 16}));
  ASSERT_EQ(p.spans.size(), 3u);
  EXPECT_EQ(p.spans[0].length() + p.spans[1].length() + p.spans[2].length(), 84u);
  EXPECT_EQ(p.sequence.shape(), (Shape{84, 64}));
  // At 128 px the three levels contribute 16^2 + 8^2 + 4^2 = 336 elements.
  const ProjectedLevels q = c.project_levels(delta_levels(rng, 128, 32));
  EXPECT_EQ(q.sequence.dim(0), 336u);
  EXPECT_EQ(q.spans[2].offset, 320u);
}

TEST(Clcrp, SplitAndFlattenRoundTrip) {
  Rng rng(2);
  const auto spans = spans_for({{4, 3}, {2, 2}, {1, 1}});
  const Tensor seq = random_tensor({17, 5}, rng);
  EXPECT_EQ(flatten_levels(split_levels(seq, spans)).values(), seq.values());
}

TEST(Clcrp, ReferencePointsShareNormalizedLocation) {
  const auto spans = spans_for({{4, 4}, {2, 2}, {1, 1}});
  const auto refs = reference_points(spans);
  // Element (3, 1) of level 0 sits at normalized (1/3, 1) and maps to (1/3, 1) in the 2x2 level.
  const std::size_t q = 3 * 4 + 1;
  EXPECT_DOUBLE_EQ(refs[0].at(2 * q), 1.0);
  EXPECT_DOUBLE_EQ(refs[0].at(2 * q + 1), 3.0);
  EXPECT_DOUBLE_EQ(refs[1].at(2 * q), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(refs[1].at(2 * q + 1), 1.0);
  EXPECT_DOUBLE_EQ(refs[2].at(2 * q), 0.0);
}

TEST(DeformableAttention, MatchesScalarOracle) {
  Rng rng(3);
  ParameterStore store;
  const DeformableAttention a(store, "da", 8, 2, 3, 3, rng);
  fill_random(a.offset_proj.weight, rng, -0.8, 0.8);
  fill_random(a.offset_proj.bias, rng, -1.5, 1.5);
  fill_random(a.weight_proj.weight, rng, -1, 1);
  fill_random(a.weight_proj.bias, rng, -1, 1);
  const auto spans = spans_for({{4, 4}, {2, 3}, {1, 1}});
  const Tensor x = random_tensor({23, 8}, rng), pos = random_tensor({23, 8}, rng);
  const Tensor query = add(x, pos);
  const auto refs = reference_points(spans);
  const Tensor out = a(query, x, refs, spans);
  const auto ref = deform_oracle(a, query, x, refs, spans);
  ASSERT_EQ(out.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.at(i), ref[i], 1e-12) << i;
}

TEST(DeformableAttention, WeightsSumToOnePerHead) {
  Rng rng(4);
  ParameterStore store;
  const DeformableAttention a(store, "da", 8, 4, 3, 4, rng);
  fill_random(a.weight_proj.weight, rng, -3, 3);
  const Tensor w = a.attention_weights(random_tensor({5, 8}, rng, -2, 2));
  ASSERT_EQ(w.shape(), (Shape{5, 4, 3, 4}));
  for (std::size_t r = 0; r < 5 * 4; ++r) {
    double s = 0;
    for (std::size_t t = 0; t < 12; ++t) s += w.at(r * 12 + t);
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(DeformableAttention, ZeroInitSamplesReferencePointsUniformly) {
  // Fresh predictors are zero: every point samples the reference location with weight 1/(L K).
  Rng rng(5);
  ParameterStore store;
  const DeformableAttention a(store, "da", 4, 1, 1, 2, rng);
  const auto spans = spans_for({{2, 2}});
  const Tensor x = random_tensor({4, 4}, rng);
  const Tensor out = a(x, x, reference_points(spans), spans);
  const Tensor expect = a.output_proj(a.value_proj(x));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.at(i), expect.at(i), 1e-12);
}

TEST(DeformableAttention, GradientsIncludingOffsets) {
  Rng rng(6);
  ParameterStore store;
  const DeformableAttention a(store, "da", 4, 2, 2, 2, rng);
  fill_random(a.offset_proj.weight, rng, -0.6, 0.6);
  fill_random(a.offset_proj.bias, rng, -0.7, 0.7);
  fill_random(a.weight_proj.weight, rng, -1, 1);
  const auto spans = spans_for({{3, 3}, {2, 2}});
  const auto refs = reference_points(spans);
  const Tensor x = random_tensor({13, 4}, rng);
  const auto r = check_parameter_gradients(store, [&] { return a(x, x, refs, spans); }, rng, 6);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  const auto ri = check_gradients([&](const auto& in) { return a(in[0], in[1], refs, spans); }, {x, random_tensor({13, 4}, rng)}, rng);
  EXPECT_LT(ri.max_rel_error, 1e-5) << ri.worst;
}

TEST(DeformableAttention, NonFiniteOffsetsRaise) {
  Rng rng(7);
  ParameterStore store;
  const DeformableAttention a(store, "da", 4, 1, 1, 1, rng);
  a.offset_proj.bias.impl()->data[0] = std::numeric_limits<double>::infinity();
  const auto spans = spans_for({{2, 2}});
  const Tensor x = random_tensor({4, 4}, rng);
  EXPECT_THROW(a(x, x, reference_points(spans), spans), NumericError);
}

TEST(Clcrp, FuseAddsUpsampledLevelTwoToResidual) {
  Rng rng(8);
  ParameterStore store;
  ClcrpConfig cfg;
  cfg.dim = 8;
  cfg.deform.heads = 2;
  cfg.deform.layers = 1;
  const Clcrp c(store, cfg, {4, 8, 16, 32}, rng);
  const auto spans = spans_for({{2, 2}, {1, 1}, {1, 1}});
  const Tensor encoded = random_tensor({6, 8}, rng), residual = random_tensor({8, 4, 4}, rng);
  const PerPixelEmbeddings g = c.fuse(encoded, spans, residual);
  ASSERT_EQ(g.gamma.size(), 4u);
  EXPECT_EQ(g.gamma[0].shape(), (Shape{8, 4, 4}));
  EXPECT_EQ(g.gamma[1].shape(), (Shape{8, 2, 2}));
  // Replace gamma_2 by zeros: the only change is the upsampled term inside the conv.
  const Tensor zeroed = concat({Tensor(Shape{4, 8}), slice(encoded, 0, 4, 2)}, 0);
  const Tensor only_res = c.fuse(zeroed, spans, residual).gamma[0];
  const Tensor only_up = c.fuse(encoded, spans, Tensor(Shape{8, 4, 4})).gamma[0];
  const Tensor none = c.fuse(zeroed, spans, Tensor(Shape{8, 4, 4})).gamma[0];
  for (std::size_t i = 0; i < only_res.size(); ++i) EXPECT_NEAR(g.gamma[0].at(i), only_res.at(i) + only_up.at(i) - none.at(i), 1e-12);
  EXPECT_THROW(c.fuse(encoded, spans, Tensor(Shape{8, 6, 6})), DimensionError);
}

TEST(Clcrp, DisablingDeformableEncoderPassesSequenceThrough) {
  Rng rng(9);
  ParameterStore store;
  ClcrpConfig cfg;
  cfg.dim = 8;
  cfg.deform.heads = 2;
  cfg.disable_deform_mhsa = true;
  const Clcrp c(store, cfg, {4, 8, 16, 32}, rng);
  const auto spans = spans_for({{2, 2}, {1, 1}, {1, 1}});
  const Tensor seq = random_tensor({6, 8}, rng);
  EXPECT_TRUE(c.encode(seq, spans).same_storage(seq));
  cfg.disable_deform_mhsa = false;
  ParameterStore store2;
  const Clcrp full(store2, cfg, {4, 8, 16, 32}, rng);
  EXPECT_NE(full.encode(seq, spans).values(), seq.values());
}

TEST(Clcrp, EndToEndGradients) {
  Rng rng(10);
  ParameterStore store;
  ClcrpConfig cfg;
  cfg.dim = 8;
  cfg.deform.heads = 2;
  cfg.deform.points = 2;
  cfg.deform.layers = 1;
  const Clcrp c(store, cfg, {4, 8, 16, 32}, rng);
  for (auto& layer : c.layers()) {
    fill_random(layer.attn.offset_proj.weight, rng, -0.3, 0.3);
    fill_random(layer.attn.weight_proj.weight, rng, -0.5, 0.5);
  }
  const auto delta = delta_levels(rng, 16, 2);
  const auto r = check_parameter_gradients(store, [&] { return c(delta).gamma[0]; }, rng, 3);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}
