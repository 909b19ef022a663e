#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "maskcd/tensor.hpp"

namespace maskcd {

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {x}, [x](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

/// out.flat[k] = x.flat[index[k]]; a negative index yields 0. Gradients scatter-add back.
inline Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape out_shape) {
  if (shape_numel(out_shape) != index->size()) {
    throw DimensionError("gather: index length does not match output shape " + shape_str(out_shape));
  }
  const double* px = x.data().data();
  const auto n_in = static_cast<std::int64_t>(x.size());
  std::vector<double> out(index->size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::int64_t j = (*index)[k];
    if (j >= n_in) throw DimensionError("gather: index out of range for " + shape_str(x.shape()));
    out[k] = j < 0 ? 0.0 : px[j];
  }
  return detail::make_result(std::move(out_shape), std::move(out), {x}, [x, index](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const std::int64_t j = (*index)[k];
      if (j >= 0) gx[j] += g[k];
    }
  });
}

/// Row gather on a rank-2 tensor: out[r] = x[rows[r]].
inline Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows expects rank 2, got " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  const auto n_rows = static_cast<std::int64_t>(x.dim(0));
  std::vector<double> out(rows->size() * cols);
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows->size(); ++r) {
    const std::int64_t src = (*rows)[r];
    if (src < 0 || src >= n_rows) throw DimensionError("gather_rows: row index out of range");
    std::copy(px + src * cols, px + (src + 1) * cols, out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return detail::make_result(Shape{rows->size(), cols}, std::move(out), {x}, [x, rows, cols](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows->size(); ++r) {
      const auto src = static_cast<std::size_t>((*rows)[r]);
      for (std::size_t c = 0; c < cols; ++c) gx[src * cols + c] += g[r * cols + c];
    }
  });
}

inline Tensor gather_rows(const Tensor& x, std::vector<std::int64_t> rows) {
  return gather_rows(x, std::make_shared<const std::vector<std::int64_t>>(std::move(rows)));
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw DimensionError("permute: rank mismatch for " + shape_str(in));
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in[perm[i]];
  const std::size_t n = x.size();
  auto index = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*index)[k] = static_cast<std::int64_t>(flat);
    for (std::size_t axis = rank; axis-- > 0;) {
      const std::size_t s = in_stride[perm[axis]];
      if (++counter[axis] < out_shape[axis]) {
        flat += s;
        break;
      }
      flat -= s * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
  return gather(x, index, out_shape);
}

/// Swaps the last two axes.
inline Tensor transpose_last(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last needs rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i)) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t out_len = out_shape[axis];
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const double* pp = p.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pp + o * len * inner, pp + (o + 1) * len * inner, out.begin() + static_cast<std::ptrdiff_t>((o * out_len + offset) * inner));
    offset += len;
  }
  return detail::make_result(out_shape, std::move(out), parts, [parts, outer, inner, out_len, axis](const std::vector<double>& g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(axis);
      if (double* gp = detail::grad_target(p)) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < len * inner; ++k) gp[o * len * inner + k] += g[(o * out_len + offset) * inner + k];
      }
      offset += len;
    }
  });
}

/// Contiguous sub-range [start, start+length) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  if (axis >= in.size() || start + length > in[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + length) + ") out of range for " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t in_len = in[axis];
  Shape out_shape = in;
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(px + (o * in_len + start) * inner, px + (o * in_len + start + length) * inner,
              out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  return detail::make_result(out_shape, std::move(out), {x}, [x, outer, inner, in_len, start, length](const std::vector<double>& g) {
    double* gx = detail::grad_target(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < length * inner; ++k) gx[(o * in_len + start) * inner + k] += g[o * length * inner + k];
  });
}

}  // namespace maskcd
