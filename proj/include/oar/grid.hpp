#pragma once

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace oar {

struct GridShape {
  int rows = 1;  // patches vertically (S_h)
  int cols = 1;  // patches horizontally (S_w)

  int size() const { return rows * cols; }

  void validate() const {
    if (rows < 1 || cols < 1) throw std::invalid_argument("GridShape: sides must be >= 1");
  }
  bool operator==(const GridShape&) const = default;
};

struct Position {
  int row = 0;
  int col = 0;

  static Position from_linear(int l, const GridShape& g) {
    return Position{l / g.cols, l % g.cols};
  }
  int linear(const GridShape& g) const { return row * g.cols + col; }

  bool on_grid(const GridShape& g) const {
    return row >= 0 && row < g.rows && col >= 0 && col < g.cols;
  }
  bool operator==(const Position&) const = default;
};

/// Chebyshev distance between two patches.
inline int linf_distance(const Position& a, const Position& b) {
  return std::max(std::abs(a.row - b.row), std::abs(a.col - b.col));
}

struct RelativeIndex {
  int row;  // into the relative row table, [0, 2*S_h)
  int col;  // into the relative col table, [0, 2*S_w)
};

/// Per-axis lookup index S + (next - prev) into the relative tables.
/// On-grid pairs always land in [1, 2S-1]; index 0 on both axes is the
/// dedicated start-offset row, used when there is no previous position.
inline RelativeIndex relative_index(const Position* prev, const Position& next,
                                    const GridShape& grid) {
  if (!next.on_grid(grid)) {
    throw std::invalid_argument("relative_index: next position (" +
                                std::to_string(next.row) + "," + std::to_string(next.col) +
                                ") off grid");
  }
  if (prev == nullptr) return RelativeIndex{0, 0};
  return RelativeIndex{grid.rows + next.row - prev->row,
                       grid.cols + next.col - prev->col};
}

}  // namespace oar
