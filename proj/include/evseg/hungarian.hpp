#pragma once

// Minimum-cost injective assignment of rows to columns (rows <= cols),
// shortest-augmenting-path formulation with potentials. Optimal, O(n^3).

#include <cstddef>
#include <vector>

namespace evseg {

struct Assignment {
  std::vector<std::size_t> row_to_col;  // one entry per row
  double total_cost = 0;
};

// cost is row-major rows x cols; all entries must be finite.
Assignment hungarian_match(const std::vector<double>& cost, std::size_t rows, std::size_t cols);

}  // namespace evseg
