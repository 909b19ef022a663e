#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "maskcd/errors.hpp"

namespace maskcd {

/// Row-major cost matrix with `rows` <= `cols`.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Ground-truth index j is matched to prediction `target[j]`.
struct Assignment {
  std::vector<std::size_t> target;
  std::vector<std::uint8_t> matched;  // per prediction: 1 if some ground truth chose it
  double cost = 0.0;
};

namespace detail {

/// Minimum-cost assignment of every row to a distinct column, by shortest
/// augmenting paths with potentials. Returns the column of each row.
inline std::vector<std::size_t> solve_assignment(std::size_t n, std::size_t m, const std::vector<double>& a) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) col[p[j] - 1] = j - 1;
  }
  return col;
}

inline double assignment_total(const CostMatrix& c, const std::vector<std::size_t>& col) {
  double t = 0.0;
  for (std::size_t r = 0; r < col.size(); ++r) t += c(r, col[r]);
  return t;
}

/// Optimal total over rows [first, rows) using only columns not in `taken`.
inline double residual_optimum(const CostMatrix& c, std::size_t first, const std::vector<char>& taken) {
  std::vector<std::size_t> free_cols;
  for (std::size_t j = 0; j < c.cols; ++j) {
    if (!taken[j]) free_cols.push_back(j);
  }
  const std::size_t n = c.rows - first, m = free_cols.size();
  if (n == 0) return 0.0;
  std::vector<double> sub(n * m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) sub[r * m + j] = c(first + r, free_cols[j]);
  const auto col = solve_assignment(n, m, sub);
  double t = 0.0;
  for (std::size_t r = 0; r < n; ++r) t += sub[r * m + col[r]];
  return t;
}

}  // namespace detail

/// Minimum-total assignment of each row (ground truth) to a distinct column
/// (prediction). Among optimal assignments the lexicographically smallest
/// column vector is returned.
inline Assignment hungarian_assign(const CostMatrix& cost) {
  if (cost.rows > cost.cols) {
    throw InputError("hungarian_assign: " + std::to_string(cost.rows) + " targets exceed " + std::to_string(cost.cols) + " predictions");
  }
  if (cost.values.size() != cost.rows * cost.cols) throw DimensionError("hungarian_assign: cost buffer size mismatch");
  for (std::size_t k = 0; k < cost.values.size(); ++k) {
    if (!std::isfinite(cost.values[k])) {
      throw InputError("hungarian_assign: non-finite cost at (" + std::to_string(k / cost.cols) + ", " + std::to_string(k % cost.cols) + ")");
    }
  }
  Assignment out;
  out.matched.assign(cost.cols, 0);
  if (cost.rows == 0) return out;

  const auto first = detail::solve_assignment(cost.rows, cost.cols, cost.values);
  const double best = detail::assignment_total(cost, first);
  double scale = 1.0;
  for (double v : cost.values) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * scale * static_cast<double>(cost.rows);

  // Fix rows one at a time to the smallest column that still admits an optimal completion.
  std::vector<char> taken(cost.cols, 0);
  double prefix = 0.0;
  out.target.resize(cost.rows);
  for (std::size_t r = 0; r < cost.rows; ++r) {
    bool fixed = false;
    for (std::size_t j = 0; j < cost.cols && !fixed; ++j) {
      if (taken[j]) continue;
      taken[j] = 1;
      const double total = prefix + cost(r, j) + detail::residual_optimum(cost, r + 1, taken);
      if (total <= best + tol) {
        out.target[r] = j;
        prefix += cost(r, j);
        fixed = true;
      } else {
        taken[j] = 0;
      }
    }
    if (!fixed) {
      out.target = first;
      break;
    }
  }
  for (std::size_t c : out.target) out.matched[c] = 1;
  out.cost = detail::assignment_total(cost, out.target);
  return out;
}

}  // namespace maskcd
