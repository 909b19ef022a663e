#pragma once

#include <Eigen/Core>

#include "maskcd/ops/elementwise.hpp"

namespace maskcd {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

}  // namespace detail

/// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n]; batch axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb) throw DimensionError("matmul: inner extents differ in " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shape(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch extents of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not broadcast");
  }
  const std::size_t n_batch = shape_numel(batch);
  auto ia = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(a_batch, batch));
  auto ib = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(b_batch, batch));

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(n_batch * m * n);
  for (std::size_t t = 0; t < n_batch; ++t) {
    detail::ConstMap A(a.data().data() + (*ia)[t] * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    detail::ConstMap B(b.data().data() + (*ib)[t] * k * n, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    detail::MutMap C(out.data() + t * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    C.noalias() = A * B;
  }

  return detail::make_result(out_shape, std::move(out), {a, b}, [a, b, ia, ib, m, k, n, n_batch](const std::vector<double>& g) {
    double* ga = detail::grad_target(a);
    double* gb = detail::grad_target(b);
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    for (std::size_t t = 0; t < n_batch; ++t) {
      detail::ConstMap G(g.data() + t * m * n, M, N);
      if (ga) {
        detail::ConstMap B(b.data().data() + (*ib)[t] * k * n, K, N);
        detail::MutMap GA(ga + (*ia)[t] * m * k, M, K);
        GA.noalias() += G * B.transpose();
      }
      if (gb) {
        detail::ConstMap A(a.data().data() + (*ia)[t] * m * k, M, K);
        detail::MutMap GB(gb + (*ib)[t] * k * n, K, N);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

}  // namespace maskcd
