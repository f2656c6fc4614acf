#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace iceq {

// Composite-midpoint rule on an open grid: nodes are panel midpoints, so
// endpoints (and any listed breakpoints) are never evaluation points.
struct QuadratureGrid {
    std::vector<double> nodes;
    std::vector<double> weights;

    double integrate(const std::vector<double>& fvals) const {
        double s = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * fvals[i];
        return s;
    }

    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
        return s;
    }
};

// Near a hinted endpoint the last 5% of the domain is subdivided
// geometrically (ratio 1/2, `levels` extra levels), each level carrying a
// fixed panel count, so the panel width shrinks toward the endpoint.
inline QuadratureGrid build_open_grid(double a, double b, int n, bool refine_left = false,
                                      bool refine_right = false,
                                      std::vector<double> breakpoints = {}, int levels = 8) {
    if (!(a < b)) throw std::invalid_argument("build_open_grid: empty domain");
    if (n < 4) throw std::invalid_argument("build_open_grid: grid too small");
    double L = b - a;
    double h = L / n;
    std::vector<double> bounds{a, b};
    for (double t : breakpoints)
        if (t > a && t < b) bounds.push_back(t);
    double tail = 0.05 * L;
    if (refine_left)
        for (int k = 0; k <= levels; ++k) bounds.push_back(a + tail * std::ldexp(1.0, -k));
    if (refine_right)
        for (int k = 0; k <= levels; ++k) bounds.push_back(b - tail * std::ldexp(1.0, -k));
    std::sort(bounds.begin(), bounds.end());
    bounds.erase(std::unique(bounds.begin(), bounds.end(),
                             [&](double x, double y) { return y - x < 1e-15 * L; }),
                 bounds.end());

    int tail_panels = std::max(2, n / 64);
    QuadratureGrid q;
    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
        double lo = bounds[s], hi = bounds[s + 1];
        bool in_tail = (refine_left && hi <= a + tail + 1e-15 * L) ||
                       (refine_right && lo >= b - tail - 1e-15 * L);
        int m = in_tail ? std::min(tail_panels, std::max(2, (int)std::lround((hi - lo) / h)))
                        : std::max(1, (int)std::lround((hi - lo) / h));
        if (in_tail) m = std::max(2, m);
        double w = (hi - lo) / m;
        for (int i = 0; i < m; ++i) {
            q.nodes.push_back(lo + (i + 0.5) * w);
            q.weights.push_back(w);
        }
    }
    return q;
}

// Midpoint quadrature of a callable over [lo,hi] with `m` panels.
template <class F>
double midpoint_integrate(F&& f, double lo, double hi, int m) {
    if (hi <= lo) return 0.0;
    double w = (hi - lo) / m;
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += f(lo + (i + 0.5) * w);
    return s * w;
}

// Integral over [lo,hi] with geometric refinement toward `hi` (ratio 1/2),
// stopping when the last level's relative contribution falls below rel_tol.
template <class F>
double refine_toward_upper(F&& f, double lo, double hi, int base_panels, int max_levels = 12,
                           double rel_tol = 1e-4) {
    double cut = lo + 0.95 * (hi - lo);
    double total = midpoint_integrate(f, lo, cut, base_panels);
    double seg_lo = cut;
    for (int k = 0; k < max_levels; ++k) {
        double seg_hi = hi - (hi - seg_lo) * 0.5;
        double c = midpoint_integrate(f, seg_lo, seg_hi, std::max(4, base_panels / 32));
        total += c;
        if (std::abs(c) < rel_tol * std::max(1e-300, std::abs(total)) && k >= 2) {
            // close the remaining sliver at current resolution and stop
            total += midpoint_integrate(f, seg_hi, hi, std::max(4, base_panels / 32));
            return total;
        }
        seg_lo = seg_hi;
    }
    total += midpoint_integrate(f, seg_lo, hi, std::max(4, base_panels / 32));
    return total;
}

}  // namespace iceq
