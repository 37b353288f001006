#include "cellrefine/longtail.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cellrefine/errors.hpp"

namespace cellrefine {

TailFit fit_tail_exponent(std::vector<long> counts, double tail_fraction, CcdfMode mode) {
    if (!(tail_fraction > 0.0) || tail_fraction > 1.0) {
        throw InvalidConfig("tail_fraction must be in (0, 1]");
    }
    const int n = static_cast<int>(counts.size());
    if (n < 3) {
        throw TooFewCategories("need at least 3 categories, got " + std::to_string(n));
    }
    for (long c : counts) {
        if (c <= 0) throw InvalidConfig("category counts must be positive");
    }
    std::sort(counts.begin(), counts.end());

    int m = static_cast<int>(std::floor(tail_fraction * n));
    m = std::max(m, 3);
    m = std::min(m, n);

    TailFit fit;
    fit.counts_used.assign(counts.begin(), counts.begin() + m);

    // distinct count values in the tail; duplicates collapse to one point
    std::vector<long> distinct = fit.counts_used;
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (static_cast<int>(distinct.size()) < 3) {
        throw TooFewCategories("tail holds only " + std::to_string(distinct.size()) +
                               " distinct counts; need 3");
    }

    std::vector<double> xs, ys;
    xs.reserve(distinct.size());
    ys.reserve(distinct.size());
    for (long v : distinct) {
        double num;
        double denom;
        if (mode == CcdfMode::tail_only) {
            num = static_cast<double>(fit.counts_used.end() -
                                      std::lower_bound(fit.counts_used.begin(),
                                                       fit.counts_used.end(), v));
            denom = static_cast<double>(m);
        } else {
            num = static_cast<double>(counts.end() -
                                      std::lower_bound(counts.begin(), counts.end(), v));
            denom = static_cast<double>(n);
        }
        xs.push_back(std::log(static_cast<double>(v)));
        ys.push_back(std::log(num / denom));
    }

    const int k = static_cast<int>(xs.size());
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < k; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= k;
    my /= k;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (int i = 0; i < k; ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    const double slope = sxy / sxx;
    fit.alpha = -slope;
    fit.num_points = k;
    if (syy <= 0.0) {
        fit.r2 = 0.0;  // degenerate: no variance in the response
    } else {
        const double ss_res = syy - slope * sxy;
        fit.r2 = 1.0 - ss_res / syy;
        fit.r2 = std::min(1.0, std::max(0.0, fit.r2));
    }
    return fit;
}

}  // namespace cellrefine
