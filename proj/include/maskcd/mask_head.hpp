#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "maskcd/decoder.hpp"

namespace maskcd {

/// Class indices; `kNoObject` exists only with three-way logits.
inline constexpr std::size_t kChanged = 0;
inline constexpr std::size_t kUnchanged = 1;
inline constexpr std::size_t kNoObject = 2;

struct MaskHeadConfig {
  bool two_logit_classes = false;
  std::size_t mlp_layers = 3;
  std::size_t classes() const { return two_logit_classes ? 2 : 3; }
};

/// One prediction set: class logits [N, C] and stride-4 mask logits [N, H1, W1].
struct ProbMaskPair {
  Tensor class_logits;
  Tensor mask_logits;
};

struct ChangeMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;  // 1 = changed
  std::vector<double> score_changed;
  std::vector<double> score_unchanged;
};

class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(ParameterStore& store, const MaskHeadConfig& config, std::size_t dim, Rng& rng, const std::string& name = "head")
      : config_(config) {
    classifier_ = Linear(store, name + ".classifier", dim, config.classes(), rng);
    mask_mlp_ = Mlp(store, name + ".mask_mlp", std::vector<std::size_t>(config.mlp_layers + 1, dim), rng);
  }

  const MaskHeadConfig& config() const { return config_; }
  const Mlp& mask_mlp() const { return mask_mlp_; }
  Linear& classifier() { return classifier_; }

  Tensor classify_queries(const Tensor& x) const { return classifier_(x); }

  Tensor mask_embeddings(const Tensor& x) const { return mask_mlp_(x); }

  Tensor masks_from_embeddings(const Tensor& x, const Tensor& gamma1) const {
    return reshape(query_mask_logits(x, gamma1, mask_mlp_), Shape{x.dim(0), gamma1.dim(1), gamma1.dim(2)});
  }

  ProbMaskPair operator()(const Tensor& x, const Tensor& gamma1) const {
    return ProbMaskPair{classify_queries(x), masks_from_embeddings(x, gamma1)};
  }

 private:
  MaskHeadConfig config_;
  Linear classifier_;
  Mlp mask_mlp_;
};

/// Pixel-wise scores S_c = sum_i p_i(c) * sigmoid(upsample4(m_i)); label is
/// changed only where S_changed > S_unchanged. Pairs are summed in a canonical
/// order so the result does not depend on how the predictions are indexed.
inline ChangeMap assemble_change_map(const ProbMaskPair& pair, std::size_t factor = 4) {
  NoGradGuard no_grad;
  const std::size_t n = pair.class_logits.dim(0), c = pair.class_logits.dim(1);
  if (pair.mask_logits.rank() != 3 || pair.mask_logits.dim(0) != n) {
    throw DimensionError("assemble_change_map: class logits " + shape_str(pair.class_logits.shape()) + " vs masks " +
                         shape_str(pair.mask_logits.shape()));
  }
  const std::size_t h1 = pair.mask_logits.dim(1), w1 = pair.mask_logits.dim(2);
  const auto cl = pair.class_logits.data();
  const auto ml = pair.mask_logits.data();
  const std::size_t per_mask = h1 * w1;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) {
    const bool cls_eq = std::equal(cl.begin() + a * c, cl.begin() + (a + 1) * c, cl.begin() + b * c);
    if (!cls_eq) return std::lexicographical_compare(cl.begin() + a * c, cl.begin() + (a + 1) * c, cl.begin() + b * c, cl.begin() + (b + 1) * c);
    return std::lexicographical_compare(ml.begin() + a * per_mask, ml.begin() + (a + 1) * per_mask, ml.begin() + b * per_mask,
                                        ml.begin() + (b + 1) * per_mask);
  };
  std::stable_sort(order.begin(), order.end(), less);

  const Tensor probs = softmax_lastdim(pair.class_logits);
  ChangeMap out;
  out.height = h1 * factor;
  out.width = w1 * factor;
  const std::size_t pixels = out.height * out.width;
  out.score_changed.assign(pixels, 0.0);
  out.score_unchanged.assign(pixels, 0.0);
  for (std::size_t i : order) {
    const Tensor up = upsample_bilinear(reshape(slice(pair.mask_logits, 0, i, 1), Shape{1, h1, w1}), factor);
    const auto uv = up.data();
    const double pc = probs.at(i * c + kChanged), pu = probs.at(i * c + kUnchanged);
    for (std::size_t p = 0; p < pixels; ++p) {
      const double s = sigmoid_value(uv[p]);
      out.score_changed[p] += pc * s;
      out.score_unchanged[p] += pu * s;
    }
  }
  out.labels.resize(pixels);
  for (std::size_t p = 0; p < pixels; ++p) out.labels[p] = out.score_changed[p] > out.score_unchanged[p] ? 1 : 0;
  return out;
}

/// Labels from two-channel per-pixel logits [2, H1, W1] upsampled by `factor`.
inline ChangeMap per_pixel_change_map(const Tensor& logits, std::size_t factor = 4) {
  NoGradGuard no_grad;
  const Tensor up = upsample_bilinear(logits, factor);
  ChangeMap out;
  out.height = up.dim(1);
  out.width = up.dim(2);
  const std::size_t pixels = out.height * out.width;
  const auto v = up.data();
  out.score_changed.assign(v.begin() + kChanged * pixels, v.begin() + (kChanged + 1) * pixels);
  out.score_unchanged.assign(v.begin() + kUnchanged * pixels, v.begin() + (kUnchanged + 1) * pixels);
  out.labels.resize(pixels);
  for (std::size_t p = 0; p < pixels; ++p) out.labels[p] = out.score_changed[p] > out.score_unchanged[p] ? 1 : 0;
  return out;
}

}  // namespace maskcd
