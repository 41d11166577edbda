#pragma once

// Minimum-cost assignment (Kuhn-Munkres with potentials, O(n^3)).
// Rectangular problems with rows <= cols are padded to square with
// zero-cost dummy rows, which leaves the optimum over real rows unchanged.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace natlab {

template <typename T>
struct Assignment {
  std::vector<int> row_to_col;
  T cost{};
};

/// `cost` is row-major with `rows` x `cols` entries, rows <= cols.
template <typename T>
Assignment<T> solve_assignment(std::span<const T> cost, int rows, int cols) {
  if (rows < 0 || cols < 0 || cost.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
    throw std::invalid_argument("solve_assignment: cost size does not match shape");
  if (rows > cols) throw std::invalid_argument("solve_assignment: more rows than columns");
  Assignment<T> result;
  if (rows == 0) return result;

  const std::size_t r = static_cast<std::size_t>(rows);
  const std::size_t n = static_cast<std::size_t>(cols);
  const T inf = std::numeric_limits<T>::infinity();
  // 1-based indices; rows beyond `r` are the zero-cost padding.
  auto at = [&](std::size_t i, std::size_t j) -> T { return i <= r ? cost[(i - 1) * n + (j - 1)] : T{}; };

  std::vector<T> u(n + 1, T{}), v(n + 1, T{}), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);

  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      T delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const T cur = at(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      if (j1 == 0) throw std::runtime_error("solve_assignment: non-finite costs");
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.row_to_col.assign(r, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (match[j] >= 1 && match[j] <= r) result.row_to_col[match[j] - 1] = static_cast<int>(j - 1);
  for (std::size_t i = 0; i < r; ++i)
    result.cost += cost[i * n + static_cast<std::size_t>(result.row_to_col[i])];
  return result;
}

}  // namespace natlab
