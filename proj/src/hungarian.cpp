#include "evseg/hungarian.hpp"

#include <cmath>
#include <limits>

#include "evseg/common.hpp"

namespace evseg {

Assignment hungarian_match(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (rows > cols) throw ValidationError("hungarian_match: more rows than columns");
  if (cost.size() != rows * cols) throw ValidationError("hungarian_match: cost size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw ValidationError("hungarian_match: non-finite cost");

  Assignment out;
  out.row_to_col.assign(rows, 0);
  if (rows == 0) return out;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t n = rows, m = cols;
  // 1-based potentials; p[j] = row currently matched to column j (0 = none)
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) out.row_to_col[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < rows; ++i) out.total_cost += cost[i * cols + out.row_to_col[i]];
  return out;
}

}  // namespace evseg
