#pragma once

// =============================================================
//  power-law tail quantification: log-log regression on the
//  CCDF of the rarest categories
// =============================================================

#include <vector>

namespace cellrefine {

enum class CcdfMode {
    tail_only,          // CCDF normalized within the rare subset (default)
    full_distribution,  // CCDF over all categories, evaluated at tail values
};

struct TailFit {
    double alpha = 0.0;
    double r2 = 0.0;
    int num_points = 0;              // distinct tail count values regressed
    std::vector<long> counts_used;   // the rare-category counts (pre-collapse)
};

// Sorts counts ascending, takes the rarest max(3, floor(tail_fraction * n))
// categories, collapses duplicate count values to single CCDF points, and
// regresses log CCDF on log count. alpha = -slope.
TailFit fit_tail_exponent(std::vector<long> counts, double tail_fraction = 0.30,
                          CcdfMode mode = CcdfMode::tail_only);

}  // namespace cellrefine
