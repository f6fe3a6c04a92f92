#pragma once

#include "detra/nn.hpp"

#include <functional>
#include <random>
#include <vector>

namespace detra {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Relative error with an absolute floor so near-zero gradients compare on scale.
inline double grad_rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / scale;
}

/// Builds a graph from tape leaves (inputs) and returns any output; the output
/// is scalarized by a fixed random projection.
using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Central finite differences against reverse mode for every entry of
/// `inputs` (up to `max_entries` per input, evenly strided) and of the
/// parameters in `store` (if not null).
GradCheckResult gradcheck(const GraphFn& fn, std::vector<Matrix> inputs, ParamStore* store,
                          std::uint64_t seed, double step = 1e-6, int max_entries = 64);

}  // namespace detra
