#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sdss/error.hpp"

namespace sdss {

/// Max-of-argmax link: index (1-based) of the largest entry, ties going to the
/// larger index.
inline int pred(std::span<const double> x) {
  if (x.empty()) throw InvalidArgument("pred: empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] >= x[best]) best = i;
  }
  return static_cast<int>(best) + 1;
}

/// Relative scores (length k-1) to full class scores (0, -g_1, ..., -g_{k-1}).
inline std::vector<double> trans(std::span<const double> g) {
  if (g.empty()) throw InvalidArgument("trans: need at least one relative score (k >= 2)");
  std::vector<double> x(g.size() + 1, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) x[i + 1] = -g[i];
  return x;
}

/// A decision rule maps (0-based stage, raw history) to a 1-based treatment.
/// The raw history for stage t is the flat vector (o_1, a_1, y_1, ..., o_t).
using DecisionRule = std::function<int(int stage, std::span<const double> raw_history)>;

}  // namespace sdss
