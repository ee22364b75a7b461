#pragma once

#include <cmath>
#include <limits>

namespace testutil {

// Fourth-order central difference of f at x. Estimates on a ladder of
// halving steps are compared pairwise; the coarser member of the most
// consistent pair is returned. A stencil that straddles a kink of a
// piecewise-linear activation disagrees with its neighbour, while the
// coarsest consistent step keeps rounding noise low.
template <typename F>
double numeric_derivative(F&& f, double x, double h0 = 3e-5, int rungs = 4) {
  const auto c4 = [&](double h) { return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h); };
  double h = h0;
  double coarse = c4(h);
  double best = coarse;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int k = 1; k < rungs; ++k) {
    h /= 2;
    const double fine = c4(h);
    const double gap = std::abs(fine - coarse);
    if (gap < best_gap) {
      best_gap = gap;
      best = coarse;
    }
    coarse = fine;
  }
  return best;
}

}  // namespace testutil
