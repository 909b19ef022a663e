#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskcd/errors.hpp"

namespace maskcd {

/// Pixel confusion counts with "changed" as the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  std::uint64_t total() const { return tp + tn + fp + fn; }
};

inline ConfusionCounts confusion_counts(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw InputError("confusion_counts: prediction has " + std::to_string(pred.size()) + " pixels, label has " + std::to_string(gt.size()));
  }
  ConfusionCounts c;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const bool p = pred[k] != 0, g = gt[k] != 0;
    if (p && g) ++c.tp;
    else if (!p && !g) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

/// A ratio whose denominator may vanish; such values are reported as 0 and flagged.
struct Ratio {
  double value = 0.0;
  bool undefined = false;
};

struct MetricReport {
  ConfusionCounts counts;
  Ratio oa, precision, recall, f1, iou_changed, iou_unchanged, miou;
};

namespace detail {

/// num / den as one rounding step whenever both fit in a double's mantissa.
inline double exact_quotient(unsigned __int128 num, unsigned __int128 den) {
  constexpr unsigned __int128 limit = static_cast<unsigned __int128>(1) << 53;
  if (num < limit && den < limit) return static_cast<double>(num) / static_cast<double>(den);
  return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
}

inline Ratio exact_ratio(unsigned __int128 num, unsigned __int128 den) {
  return den == 0 ? Ratio{0.0, true} : Ratio{exact_quotient(num, den), false};
}

}  // namespace detail

/// Micro-averaged scores from counts accumulated over a whole dataset. Every
/// score is formed as a single integer quotient, so it is the correctly rounded
/// value of the underlying fraction.
inline MetricReport compute_metrics(const ConfusionCounts& c) {
  using u128 = unsigned __int128;
  const u128 tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
  MetricReport r;
  r.counts = c;
  r.oa = detail::exact_ratio(tp + tn, tp + tn + fp + fn);
  r.precision = detail::exact_ratio(tp, tp + fp);
  r.recall = detail::exact_ratio(tp, tp + fn);
  r.f1 = detail::exact_ratio(2 * tp, 2 * tp + fp + fn);
  const u128 dc = tp + fp + fn, du = tn + fp + fn;
  r.iou_changed = detail::exact_ratio(tp, dc);
  r.iou_unchanged = detail::exact_ratio(tn, du);
  // Undefined halves count as 0.
  if (dc != 0 && du != 0) {
    r.miou = detail::exact_ratio(tp * du + tn * dc, 2 * dc * du);
  } else if (dc != 0) {
    r.miou = Ratio{detail::exact_quotient(tp, 2 * dc), true};
  } else if (du != 0) {
    r.miou = Ratio{detail::exact_quotient(tn, 2 * du), true};
  } else {
    r.miou = Ratio{0.0, true};
  }
  return r;
}

}  // namespace maskcd
