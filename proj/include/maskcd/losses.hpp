#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "maskcd/mask_head.hpp"
#include "maskcd/matching.hpp"

namespace maskcd {

struct LossWeights {
  double cls = 2.0;
  double mask = 1.0;
  double bce = 5.0;
  double dice = 2.0;
  double no_object = 0.1;
};

struct GtSegment {
  std::size_t cls = kChanged;
  std::vector<double> mask;  // binary
};

struct GroundTruthSegments {
  std::size_t height = 0, width = 0;  // extents of the segment masks
  std::vector<GtSegment> segments;
};

/// Nearest-neighbour downsampling of a full-resolution binary label
/// (row-major, values 0/1): output pixel (i, j) reads the input pixel nearest
/// its centre, (i*f + f/2, j*f + f/2).
inline std::vector<std::uint8_t> downsample_label(const std::vector<std::uint8_t>& label, std::size_t height, std::size_t width,
                                                  std::size_t factor) {
  if (label.size() != height * width) throw DimensionError("downsample_label: buffer does not match " + std::to_string(height) + "x" + std::to_string(width));
  const std::size_t h = height / factor, w = width / factor;
  std::vector<std::uint8_t> out(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = label[(i * factor + factor / 2) * width + j * factor + factor / 2];
  return out;
}

/// One changed and one unchanged segment from a full-resolution label, at
/// 1/`factor` resolution; empty ones are dropped.
inline GroundTruthSegments make_segments(const std::vector<std::uint8_t>& label, std::size_t height, std::size_t width,
                                         std::size_t factor = 4) {
  GroundTruthSegments gt;
  gt.height = height / factor;
  gt.width = width / factor;
  const auto small = factor == 1 ? label : downsample_label(label, height, width, factor);
  for (std::size_t cls : {kChanged, kUnchanged}) {
    GtSegment seg;
    seg.cls = cls;
    seg.mask.resize(small.size());
    double count = 0;
    for (std::size_t k = 0; k < small.size(); ++k) {
      const bool changed = small[k] != 0;
      seg.mask[k] = (cls == kChanged) == changed ? 1.0 : 0.0;
      count += seg.mask[k];
    }
    if (count > 0) gt.segments.push_back(std::move(seg));
  }
  return gt;
}

struct MaskLossTerms {
  Tensor bce;
  Tensor dice;
};

/// BCE (mean over pixels, computed from logits) and dice with smoothing 1.
inline MaskLossTerms mask_loss(const Tensor& logits, const Tensor& target) {
  if (logits.size() != target.size()) {
    throw DimensionError("mask_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  }
  const Tensor m = reshape(logits, Shape{logits.size()});
  const Tensor g = reshape(target, Shape{target.size()});
  MaskLossTerms t;
  t.bce = mean(sub(softplus(m), mul(g, m)));
  const Tensor s = sigmoid(m);
  const Tensor num = add_scalar(scale(sum(mul(s, g)), 2.0), 1.0);
  const Tensor den = add_scalar(add(sum(s), sum(g)), 1.0);
  t.dice = sub(Tensor::scalar(1.0), div(num, den));
  return t;
}

/// Mask logits [N, h, w] brought to the ground-truth extents by bilinear
/// upsampling (identity when they already match).
inline Tensor masks_at(const Tensor& mask_logits, const GroundTruthSegments& gt) {
  const std::size_t h = mask_logits.dim(1), w = mask_logits.dim(2);
  if (gt.height == h && gt.width == w) return mask_logits;
  if (h == 0 || gt.height % h != 0 || gt.width != w * (gt.height / h)) {
    throw DimensionError("mask logits " + shape_str(mask_logits.shape()) + " cannot be upsampled to " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
  }
  return upsample_bilinear(mask_logits, gt.height / h);
}

/// Cost[j, i] = -p_i(c_j) + w_b * BCE(m_i, g_j) + w_d * dice(m_i, g_j).
inline CostMatrix matching_cost_matrix(const ProbMaskPair& pred, const GroundTruthSegments& gt, const LossWeights& w) {
  NoGradGuard no_grad;
  const std::size_t n = pred.class_logits.dim(0), c = pred.class_logits.dim(1);
  const Tensor masks = masks_at(pred.mask_logits, gt);
  const std::size_t pixels = masks.size() / n;
  if (!gt.segments.empty() && gt.segments[0].mask.size() != pixels) {
    throw DimensionError("matching cost: mask size " + std::to_string(pixels) + " vs ground truth " + std::to_string(gt.segments[0].mask.size()));
  }
  const Tensor probs = softmax_lastdim(pred.class_logits);
  const auto ml = masks.data();
  std::vector<double> sp(ml.size()), sg(ml.size());
  for (std::size_t k = 0; k < ml.size(); ++k) {
    sp[k] = softplus_value(ml[k]);
    sg[k] = sigmoid_value(ml[k]);
  }
  CostMatrix cost;
  cost.rows = gt.segments.size();
  cost.cols = n;
  cost.values.resize(cost.rows * cost.cols);
  for (std::size_t j = 0; j < cost.rows; ++j) {
    const auto& g = gt.segments[j].mask;
    double gsum = 0;
    for (double v : g) gsum += v;
    for (std::size_t i = 0; i < n; ++i) {
      double bce = 0, inter = 0, ssum = 0;
      for (std::size_t p = 0; p < pixels; ++p) {
        const std::size_t k = i * pixels + p;
        bce += sp[k] - g[p] * ml[k];
        inter += sg[k] * g[p];
        ssum += sg[k];
      }
      bce /= static_cast<double>(pixels);
      const double dice = 1.0 - (2.0 * inter + 1.0) / (ssum + gsum + 1.0);
      cost.values[j * n + i] = -probs.at(i * c + gt.segments[j].cls) + w.bce * bce + w.dice * dice;
    }
  }
  return cost;
}

struct StageLoss {
  Tensor total;
  double cls = 0, bce = 0, dice = 0;
};

/// Loss of one prediction set under a given assignment.
///   cls: weighted mean cross-entropy; matched predictions target their segment's
///        class with weight 1, unmatched ones target no-object with `no_object` weight
///        (two-logit heads skip unmatched predictions).
///   mask: mean over matched segments of w_b * BCE + w_d * dice.
inline StageLoss stage_loss(const ProbMaskPair& pred, const GroundTruthSegments& gt, const Assignment& a, const LossWeights& w) {
  const std::size_t n = pred.class_logits.dim(0), c = pred.class_logits.dim(1);
  const bool has_no_object = c > 2;
  std::vector<double> target(n * c, 0.0);
  double weight_sum = 0;
  std::vector<std::uint8_t> is_matched(n, 0);
  for (std::size_t j = 0; j < a.target.size(); ++j) {
    target[a.target[j] * c + gt.segments[j].cls] = 1.0;
    is_matched[a.target[j]] = 1;
    weight_sum += 1.0;
  }
  if (has_no_object) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!is_matched[i]) {
        target[i * c + kNoObject] = w.no_object;
        weight_sum += w.no_object;
      }
    }
  }
  StageLoss out;
  Tensor loss = Tensor::scalar(0.0);
  if (weight_sum > 0) {
    const Tensor ce = neg(sum(mul(log_softmax_lastdim(pred.class_logits), Tensor(Shape{n, c}, std::move(target)))));
    const Tensor l_cls = scale(ce, 1.0 / weight_sum);
    out.cls = l_cls.item();
    loss = scale(l_cls, w.cls);
  }
  if (!a.target.empty()) {
    const std::size_t h = pred.mask_logits.dim(1), wd = pred.mask_logits.dim(2), pixels = gt.height * gt.width;
    Tensor l_mask;
    for (std::size_t j = 0; j < a.target.size(); ++j) {
      const Tensor m = masks_at(reshape(slice(pred.mask_logits, 0, a.target[j], 1), Shape{1, h, wd}), gt);
      const MaskLossTerms t = mask_loss(m, Tensor(Shape{pixels}, gt.segments[j].mask));
      out.bce += t.bce.item() / static_cast<double>(a.target.size());
      out.dice += t.dice.item() / static_cast<double>(a.target.size());
      const Tensor term = add(scale(t.bce, w.bce), scale(t.dice, w.dice));
      l_mask = j == 0 ? term : add(l_mask, term);
    }
    loss = add(loss, scale(l_mask, w.mask / static_cast<double>(a.target.size())));
  }
  out.total = loss;
  return out;
}

struct LossBreakdown {
  Tensor total;
  double cls = 0, bce = 0, dice = 0;  // summed over stages
  std::vector<StageLoss> stages;
  std::vector<Assignment> assignments;
};

/// Sum of stage losses with externally supplied assignments (one per stage).
inline LossBreakdown maskcd_loss_fixed(const std::vector<ProbMaskPair>& stages, const GroundTruthSegments& gt,
                                       const std::vector<Assignment>& assignments, const LossWeights& w) {
  if (assignments.size() != stages.size()) throw UsageError("maskcd_loss_fixed: one assignment per stage required");
  LossBreakdown out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    StageLoss sl = stage_loss(stages[s], gt, assignments[s], w);
    out.total = s == 0 ? sl.total : add(out.total, sl.total);
    out.cls += sl.cls;
    out.bce += sl.bce;
    out.dice += sl.dice;
    out.stages.push_back(std::move(sl));
  }
  out.assignments = assignments;
  return out;
}

/// Main loss on the last prediction set plus auxiliary losses on the others,
/// each matched independently.
inline LossBreakdown maskcd_loss(const std::vector<ProbMaskPair>& stages, const GroundTruthSegments& gt, const LossWeights& w) {
  std::vector<Assignment> assignments;
  for (const auto& p : stages) assignments.push_back(hungarian_assign(matching_cost_matrix(p, gt, w)));
  return maskcd_loss_fixed(stages, gt, assignments, w);
}

/// Cross-entropy of two-channel logits [2, H1, W1] against a stride-4 label.
inline Tensor per_pixel_loss(const Tensor& logits, const std::vector<std::uint8_t>& small_label) {
  const std::size_t pixels = logits.dim(1) * logits.dim(2);
  if (logits.dim(0) != 2 || small_label.size() != pixels) {
    throw DimensionError("per_pixel_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(small_label.size()) + " labels");
  }
  std::vector<double> onehot(pixels * 2, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) onehot[p * 2 + (small_label[p] ? kChanged : kUnchanged)] = 1.0;
  const Tensor rows = transpose_last(reshape(logits, Shape{2, pixels}));
  return scale(sum(mul(log_softmax_lastdim(rows), Tensor(Shape{pixels, 2}, std::move(onehot)))), -1.0 / static_cast<double>(pixels));
}

}  // namespace maskcd
