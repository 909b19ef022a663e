#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "maskcd/ops/linalg.hpp"
#include "maskcd/ops/shape.hpp"

namespace maskcd {

/// Softmax over the last axis. Rows that are entirely -inf become all-zero
/// rows and their indices are appended to `degenerate_rows`.
inline Tensor softmax_lastdim(const Tensor& x, std::vector<std::size_t>& degenerate_rows) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_lastdim needs a non-empty last axis");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const double* px = x.data().data();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, row[c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      degenerate_rows.push_back(r);
      continue;
    }
    double s = 0.0;
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(row[c] - mx);
      s += o[c];
    }
    const double inv = 1.0 / s;
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(x.shape(), std::move(out), {x}, [x, y, rows, cols](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y->data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += yr[c] * (gr[c] - dot);
    }
  });
}

/// Softmax over the last axis; throws NumericError on an all -inf row.
/// Callers that can legitimately produce such rows use the overload above.
inline Tensor softmax_lastdim(const Tensor& x) {
  std::vector<std::size_t> degenerate;
  Tensor y = softmax_lastdim(x, degenerate);
  if (!degenerate.empty()) {
    throw NumericError("softmax_lastdim: row " + std::to_string(degenerate.front()) + " is entirely -inf");
  }
  return y;
}

inline Tensor log_softmax_lastdim(const Tensor& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const double* px = x.data().data();
  std::vector<double> out(x.size());
  auto probs = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = row[c] - lse;
      (*probs)[r * cols + c] = std::exp(row[c] - lse);
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [x, probs, rows, cols](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] - (*probs)[r * cols + c] * gs;
    }
  });
}

/// Normalizes each row of the last axis to zero mean / unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last extent of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * pg[c] + pb[c];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, gain, bias}, [x, gain, bias, xhat, rstd, rows, d](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    double* gg = detail::grad_target(gain);
    double* gb = detail::grad_target(bias);
    const double* pg = gain.data().data();
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* h = xhat->data() + r * d;
      const double* gr = g.data() + r * d;
      if (gg)
        for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * h[c];
      if (gb)
        for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
      if (!gx) continue;
      double sum_dh = 0.0, sum_dh_h = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double dh = gr[c] * pg[c];
        sum_dh += dh;
        sum_dh_h += dh * h[c];
      }
      const double rs = (*rstd)[r];
      for (std::size_t c = 0; c < d; ++c) {
        const double dh = gr[c] * pg[c];
        gx[r * d + c] += rs * (dh - inv_d * sum_dh - h[c] * inv_d * sum_dh_h);
      }
    }
  });
}

/// Stride-1 cross-correlation of a [C_in,H,W] map with a [C_out,C_in,kh,kw] kernel.
/// Only 1x1 and 3x3 kernels are supported. `bias` may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t padding) {
  if (x.rank() != 3 || kernel.rank() != 4) {
    throw DimensionError("conv2d: expected [C,H,W] input and [O,C,kh,kw] kernel, got " + shape_str(x.shape()) + " and " +
                         shape_str(kernel.shape()));
  }
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (!((kh == 1 && kw == 1) || (kh == 3 && kw == 3))) {
    throw ConfigError("conv2d: unsupported kernel size " + std::to_string(kh) + "x" + std::to_string(kw) + " (1x1 or 3x3 only)");
  }
  if (kernel.dim(1) != C) throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined() && bias.size() != O) throw DimensionError("conv2d: bias length mismatch");
  if (H + 2 * padding < kh || W + 2 * padding < kw) throw DimensionError("conv2d: input smaller than kernel");
  const std::size_t Ho = H + 2 * padding - kh + 1, Wo = W + 2 * padding - kw + 1;
  const std::size_t rows = C * kh * kw, cols = Ho * Wo;

  // im2col; entries falling into the padding stay zero.
  auto col = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  const double* px = x.data().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* dst = col->data() + ((c * kh + ki) * kw + kj) * cols;
        for (std::size_t i = 0; i < Ho; ++i) {
          const auto si = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(padding);
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < Wo; ++j) {
            const auto sj = static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(padding);
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[i * Wo + j] = px[(c * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj)];
          }
        }
      }

  std::vector<double> out(O * cols);
  {
    detail::ConstMap K(kernel.data().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(rows));
    detail::ConstMap Col(col->data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    detail::MutMap Out(out.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(cols));
    Out.noalias() = K * Col;
  }
  if (bias.defined()) {
    const double* pb = bias.data().data();
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t k = 0; k < cols; ++k) out[o * cols + k] += pb[o];
  }

  std::vector<Tensor> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result(Shape{O, Ho, Wo}, std::move(out), parents,
                             [x, kernel, bias, col, C, H, W, O, kh, kw, padding, Ho, Wo, rows, cols](const std::vector<double>& g) {
    detail::ConstMap G(g.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(cols));
    if (double* gk = detail::grad_target(kernel)) {
      detail::ConstMap Col(col->data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      detail::MutMap GK(gk, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(rows));
      GK.noalias() += G * Col.transpose();
    }
    if (bias.defined()) {
      if (double* gb = detail::grad_target(bias))
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t k = 0; k < cols; ++k) gb[o] += g[o * cols + k];
    }
    double* gx = detail::grad_target(x);
    if (!gx) return;
    std::vector<double> gcol(rows * cols);
    {
      detail::ConstMap K(kernel.data().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(rows));
      detail::MutMap GC(gcol.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      GC.noalias() = K.transpose() * G;
    }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj) {
          const double* src = gcol.data() + ((c * kh + ki) * kw + kj) * cols;
          for (std::size_t i = 0; i < Ho; ++i) {
            const auto si = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(padding);
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t j = 0; j < Wo; ++j) {
              const auto sj = static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(padding);
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
              gx[(c * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj)] += src[i * Wo + j];
            }
          }
        }
  });
}

/// Grouped bilinear sampling in pixel coordinates.
///   feature: [H, W, G, C] (channel-last, G independent groups)
///   points:  [P, G, 2] as (x, y) pixel coordinates; pixel (i, j) has its center at (x=j, y=i)
///   result:  [P, G, C]
/// Samples outside the map read zeros. Gradients flow to both feature and points.
inline Tensor bilinear_sample_grouped(const Tensor& feature, const Tensor& points) {
  if (feature.rank() != 4 || points.rank() != 3 || points.dim(2) != 2 || points.dim(1) != feature.dim(2)) {
    throw DimensionError("bilinear_sample_grouped: feature " + shape_str(feature.shape()) + ", points " + shape_str(points.shape()));
  }
  const std::size_t H = feature.dim(0), W = feature.dim(1), G = feature.dim(2), C = feature.dim(3);
  const std::size_t P = points.dim(0);
  const double* pf = feature.data().data();
  const double* pp = points.data().data();
  std::vector<double> out(P * G * C, 0.0);

  // Corner enumeration shared by forward and backward.
  struct Corner {
    std::ptrdiff_t y0, x0;
    double fy, fx;
  };
  auto corner = [](double x, double y) {
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    return Corner{static_cast<std::ptrdiff_t>(fy0), static_cast<std::ptrdiff_t>(fx0), y - fy0, x - fx0};
  };
  auto inside = [H, W](std::ptrdiff_t yy, std::ptrdiff_t xx) {
    return yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(H) && xx < static_cast<std::ptrdiff_t>(W);
  };

  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t g = 0; g < G; ++g) {
      const double x = pp[(p * G + g) * 2], y = pp[(p * G + g) * 2 + 1];
      if (!std::isfinite(x) || !std::isfinite(y)) throw NumericError("bilinear_sample: non-finite sampling point");
      const Corner cn = corner(x, y);
      double* o = out.data() + (p * G + g) * C;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const std::ptrdiff_t yy = cn.y0 + dy, xx = cn.x0 + dx;
          if (!inside(yy, xx)) continue;
          const double w = (dy ? cn.fy : 1.0 - cn.fy) * (dx ? cn.fx : 1.0 - cn.fx);
          const double* f = pf + ((static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * G + g) * C;
          for (std::size_t c = 0; c < C; ++c) o[c] += w * f[c];
        }
    }

  return detail::make_result(Shape{P, G, C}, std::move(out), {feature, points},
                             [feature, points, H, W, G, C, P, corner, inside](const std::vector<double>& grad) {
    double* gf = detail::grad_target(feature);
    double* gp = detail::grad_target(points);
    const double* pf = feature.data().data();
    const double* pp = points.data().data();
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t g = 0; g < G; ++g) {
        const double x = pp[(p * G + g) * 2], y = pp[(p * G + g) * 2 + 1];
        const Corner cn = corner(x, y);
        const double* go = grad.data() + (p * G + g) * C;
        double dx_acc = 0.0, dy_acc = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::ptrdiff_t yy = cn.y0 + dy, xx = cn.x0 + dx;
            if (!inside(yy, xx)) continue;
            const double wy = dy ? cn.fy : 1.0 - cn.fy;
            const double wx = dx ? cn.fx : 1.0 - cn.fx;
            const std::size_t base = ((static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)) * G + g) * C;
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += go[c] * pf[base + c];
            if (gf)
              for (std::size_t c = 0; c < C; ++c) gf[base + c] += wy * wx * go[c];
            dx_acc += dot * wy * (dx ? 1.0 : -1.0);
            dy_acc += dot * wx * (dy ? 1.0 : -1.0);
          }
        if (gp) {
          gp[(p * G + g) * 2] += dx_acc;
          gp[(p * G + g) * 2 + 1] += dy_acc;
        }
      }
  });
}

/// Bilinear sampling of a [C,H,W] map at normalized points [P,2] = (x, y).
/// (0,0) is the center of pixel (0,0) and (1,1) the center of pixel (H-1,W-1);
/// samples outside the map are zero-padded. Returns [P,C].
inline Tensor bilinear_sample(const Tensor& feature, const Tensor& points) {
  if (feature.rank() != 3 || points.rank() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: feature " + shape_str(feature.shape()) + ", points " + shape_str(points.shape()));
  }
  const std::size_t C = feature.dim(0), H = feature.dim(1), W = feature.dim(2), P = points.dim(0);
  const Tensor hwc = reshape(permute(feature, {1, 2, 0}), Shape{H, W, 1, C});
  const Tensor to_pixels(Shape{2}, {static_cast<double>(W - 1), static_cast<double>(H - 1)});
  const Tensor pix = reshape(mul(points, to_pixels), Shape{P, 1, 2});
  return reshape(bilinear_sample_grouped(hwc, pix), Shape{P, C});
}

/// Bilinear upsampling of [C,H,W] by an integer factor with half-pixel centers:
/// output pixel o reads source coordinate (o + 0.5) / factor - 0.5, clamped to the map.
inline Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3 || factor == 0) throw DimensionError("upsample_bilinear: expected [C,H,W], got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = H * factor, Wo = W * factor;
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [factor](std::size_t n_out, std::size_t n_in) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double s = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, n_in - 1);
      t[o] = Tap{i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(Ho, H));
  auto tx = std::make_shared<std::vector<Tap>>(taps(Wo, W));
  const double* px = x.data().data();
  std::vector<double> out(C * Ho * Wo);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Ho; ++i) {
      const Tap& a = (*ty)[i];
      const double* r0 = px + (c * H + a.i0) * W;
      const double* r1 = px + (c * H + a.i1) * W;
      for (std::size_t j = 0; j < Wo; ++j) {
        const Tap& b = (*tx)[j];
        const double top = r0[b.i0] * (1.0 - b.w1) + r0[b.i1] * b.w1;
        const double bot = r1[b.i0] * (1.0 - b.w1) + r1[b.i1] * b.w1;
        out[(c * Ho + i) * Wo + j] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  return detail::make_result(Shape{C, Ho, Wo}, std::move(out), {x}, [x, ty, tx, C, H, W, Ho, Wo](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i) {
        const Tap& a = (*ty)[i];
        for (std::size_t j = 0; j < Wo; ++j) {
          const Tap& b = (*tx)[j];
          const double v = g[(c * Ho + i) * Wo + j];
          gx[(c * H + a.i0) * W + b.i0] += v * (1.0 - a.w1) * (1.0 - b.w1);
          gx[(c * H + a.i0) * W + b.i1] += v * (1.0 - a.w1) * b.w1;
          gx[(c * H + a.i1) * W + b.i0] += v * a.w1 * (1.0 - b.w1);
          gx[(c * H + a.i1) * W + b.i1] += v * a.w1 * b.w1;
        }
      }
  });
}

}  // namespace maskcd
