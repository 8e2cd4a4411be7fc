#pragma once

#include <vector>

namespace instformer::core {

// Minimum-cost one-to-one assignment (Jonker-Volgenant style shortest
// augmenting paths) on a dense n x m cost matrix, row-major. Assigns
// min(n, m) pairs; returns per-row column index or -1. Scan order is
// ascending, so equal-cost alternatives resolve toward low row/column
// indices deterministically.
std::vector<int> solve_assignment(const std::vector<double>& cost, int n, int m);

}  // namespace instformer::core
