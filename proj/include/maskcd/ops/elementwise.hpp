#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "maskcd/tensor.hpp"

namespace maskcd {

namespace detail {

/// Numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Flat source index for each output element of a broadcast.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    const std::size_t axis = i + (rank - src.size());
    stride[axis] = src[i] == 1 ? 0 : s;
    s *= src[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = flat;
    for (std::size_t axis = rank; axis-- > 0;) {
      if (++counter[axis] < out[axis]) {
        flat += stride[axis];
        break;
      }
      flat -= stride[axis] * (out[axis] - 1);
      counter[axis] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  const bool a_full = a.shape() == out_shape;
  const bool b_full = b.shape() == out_shape;
  std::shared_ptr<std::vector<std::size_t>> ia, ib;
  if (!a_full) ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), out_shape));
  if (!b_full) ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), out_shape));

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(n);
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
      case BinaryKind::Div: return x / y;
    }
    return 0.0;
  };
  for (std::size_t k = 0; k < n; ++k) {
    const double x = pa[ia ? (*ia)[k] : k];
    const double y = pb[ib ? (*ib)[k] : k];
    out[k] = apply(x, y);
  }

  return make_result(out_shape, std::move(out), {a, b}, [a, b, ia, ib, kind, n](const std::vector<double>& g) {
    double* ga = grad_target(a);
    double* gb = grad_target(b);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t ja = ia ? (*ia)[k] : k;
      const std::size_t jb = ib ? (*ib)[k] : k;
      switch (kind) {
        case BinaryKind::Add:
          if (ga) ga[ja] += g[k];
          if (gb) gb[jb] += g[k];
          break;
        case BinaryKind::Sub:
          if (ga) ga[ja] += g[k];
          if (gb) gb[jb] -= g[k];
          break;
        case BinaryKind::Mul:
          if (ga) ga[ja] += g[k] * pb[jb];
          if (gb) gb[jb] += g[k] * pa[ja];
          break;
        case BinaryKind::Div:
          if (ga) ga[ja] += g[k] / pb[jb];
          if (gb) gb[jb] -= g[k] * pa[ja] / (pb[jb] * pb[jb]);
          break;
      }
    }
  });
}

/// Elementwise map with derivative expressed in terms of (input, output).
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const double* px = x.data().data();
  for (std::size_t k = 0; k < n; ++k) out[k] = fwd(px[k]);
  auto out_values = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {x}, [x, out_values, deriv](const std::vector<double>& g) {
    double* gx = grad_target(x);
    if (!gx) return;
    const double* px = x.data().data();
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * deriv(px[k], (*out_values)[k]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Div, "div"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

/// log(1 + e^x), stable for large |x|.
inline double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return detail::unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(Shape{}, {s}, {x}, [x](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t k = 0; k < x.size(); ++k) gx[k] += g[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Reduces one axis by summation; the axis is removed from the shape.
inline Tensor sum_dim(const Tensor& x, std::size_t axis) {
  const Shape& in = x.shape();
  if (axis >= in.size()) throw DimensionError("sum_dim: axis out of range for " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t len = in[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (i != axis) out_shape.push_back(in[i]);
  std::vector<double> out(outer * inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += px[(o * len + l) * inner + i];
  return detail::make_result(out_shape, std::move(out), {x}, [x, outer, inner, len](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += g[o * inner + i];
  });
}

inline Tensor mean_dim(const Tensor& x, std::size_t axis) {
  return scale(sum_dim(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

}  // namespace maskcd
