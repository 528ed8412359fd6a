#pragma once

#include <cmath>

#include "rfs/errors.hpp"

namespace rfs {

// Root of a strictly increasing f on (lo, inf), assuming f <= 0 just above lo.
// f is never evaluated at lo itself, so lo may sit on a pole. The upper end
// grows geometrically from hi_guess; bisection runs until the bracket is
// below 1e-15 relative width (tighter than 1e-14 (1 + x)).
template <class F>
double solve_increasing(F f, double lo, double hi_guess) {
    double hi = hi_guess > lo ? hi_guess : (lo > 0 ? 2 * lo : 1.0);
    int expansions = 0;
    while (!(f(hi) > 0)) {
        lo = hi;
        hi *= 16;
        if (++expansions > 300 || !std::isfinite(hi)) throw NoSolutionError("root bracket expansion failed");
    }
    if (lo == 0) {
        double cand = hi;
        while (cand > 1e-300) {
            cand /= 16;
            if (f(cand) > 0) {
                hi = cand;
            } else {
                lo = cand;
                break;
            }
        }
    }
    for (int it = 0; it < 5000; ++it) {
        if (hi - lo <= 1e-15 * hi) break;
        double mid = (lo > 0 && hi > 2 * lo) ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
        if (!(mid > lo && mid < hi)) break;
        if (f(mid) > 0)
            hi = mid;
        else
            lo = mid;
    }
    return 0.5 * (lo + hi);
}

// As above, then one Newton polish kept inside the final bracket.
template <class F, class DF>
double solve_increasing(F f, DF df, double lo, double hi_guess) {
    double x = solve_increasing(f, lo, hi_guess);
    double slope = df(x);
    if (slope > 0 && std::isfinite(slope)) {
        double y = x - f(x) / slope;
        if (std::abs(y - x) <= 1e-14 * (1 + x) && y > lo) x = y;
    }
    return x;
}

}  // namespace rfs
