#include "instformer/core/assignment.hpp"

#include <cmath>
#include <limits>

#include "instformer/core/errors.hpp"

namespace instformer::core {

namespace {

// Classic potentials-based solver for n <= m, 1-indexed internals.
std::vector<int> solve_rows_le_cols(const std::vector<double>& cost, int n, int m) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(m) + 1, 0.0);
  std::vector<int> match(size_t(m) + 1, 0);  // column -> row
  std::vector<int> way(size_t(m) + 1, 0);

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(size_t(m) + 1, kInf);
    std::vector<char> used(size_t(m) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      int i0 = match[size_t(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[size_t(j)]) continue;
        double cur = cost[size_t(i0 - 1) * m + (j - 1)] - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[size_t(j)]) {
          u[size_t(match[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[size_t(j0)] != 0);
    do {
      int j1 = way[size_t(j0)];
      match[size_t(j0)] = match[size_t(j1)];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_to_col(size_t(n), -1);
  for (int j = 1; j <= m; ++j)
    if (match[size_t(j)] != 0) row_to_col[size_t(match[size_t(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<int> solve_assignment(const std::vector<double>& cost, int n, int m) {
  if (n <= 0 || m <= 0) return std::vector<int>(size_t(std::max(n, 0)), -1);
  if (int64_t(cost.size()) != int64_t(n) * m) throw ShapeError("solve_assignment: matrix size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw NumericError("solve_assignment: non-finite cost entry");
  if (n <= m) return solve_rows_le_cols(cost, n, m);

  // transpose, solve, map back
  std::vector<double> t(size_t(m) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) t[size_t(j) * n + i] = cost[size_t(i) * m + j];
  auto col_to_row = solve_rows_le_cols(t, m, n);
  std::vector<int> row_to_col(size_t(n), -1);
  for (int j = 0; j < m; ++j)
    if (col_to_row[size_t(j)] >= 0) row_to_col[size_t(col_to_row[size_t(j)])] = j;
  return row_to_col;
}

}  // namespace instformer::core
