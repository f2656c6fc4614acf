#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "iceq/core.hpp"

namespace iceq::icens {

// Interval censoring case 2: (T,U) with T < U, indicators
// delta1 = 1{X<=T}, delta2 = 1{T<X<=U}, delta3 implied.
struct IcObservation {
    double t;
    double u;
    int delta1;
    int delta2;
};

struct IcSample {
    std::vector<IcObservation> obs;

    std::size_t n() const { return obs.size(); }

    void validate() const {
        if (obs.empty()) throw std::invalid_argument("IcSample: empty sample");
        for (const auto& o : obs) {
            if (!(o.t < o.u)) throw std::invalid_argument("IcSample: t >= u");
            if (o.delta1 < 0 || o.delta1 > 1 || o.delta2 < 0 || o.delta2 > 1 ||
                o.delta1 + o.delta2 > 1)
                throw std::invalid_argument("IcSample: bad indicators");
        }
    }
};

// Observation-time density g with marginals; the parametric family is the
// uniform density on the triangle with vertices (0,eps), (0,1), (1-eps,1).
struct ObservationModel {
    double epsilon = 0.0;
    double M = 1.0;
    std::function<double(double, double)> g;
    std::function<double(double)> g1;
    std::function<double(double)> g2;
    std::string family;

    static ObservationModel uniform_triangle(double eps) {
        if (!(eps > 0.0 && eps < 1.0))
            throw std::invalid_argument("uniform_triangle: epsilon out of (0,1)");
        double c = 2.0 / ((1.0 - eps) * (1.0 - eps));
        ObservationModel m;
        m.epsilon = eps;
        m.M = 1.0;
        m.family = "uniform-triangle";
        m.g = [c, eps](double t, double u) {
            return (t >= 0.0 && u <= 1.0 && u - t > eps) ? c : 0.0;
        };
        m.g1 = [c, eps](double t) {
            return (t >= 0.0 && t <= 1.0 - eps) ? c * (1.0 - t - eps) : 0.0;
        };
        m.g2 = [c, eps](double u) {
            return (u >= eps && u <= 1.0) ? c * (u - eps) : 0.0;
        };
        return m;
    }
};

inline double d_F(const ObservationModel& m, const std::function<double(double)>& F,
                  double x) {
    double Fx = F(x);
    double den = m.g1(x) * (1.0 - Fx) + m.g2(x) * Fx;
    if (den <= 0.0) return 0.0;
    return Fx * (1.0 - Fx) / den;
}

inline double q_density(const std::function<double(double)>& F, const IcObservation& o) {
    double Ft = F(o.t), Fu = F(o.u);
    if (o.delta1) return Ft;
    if (o.delta2) return Fu - Ft;
    return 1.0 - Fu;
}

// Mean log-likelihood (1/n) sum log q_F; -inf if any contribution <= 0.
inline double loglik_case2(const std::function<double(double)>& F, const IcSample& sample) {
    double s = 0.0;
    for (const auto& o : sample.obs) {
        double q = q_density(F, o);
        if (!(q > 0.0)) return -std::numeric_limits<double>::infinity();
        s += std::log(q);
    }
    return s / static_cast<double>(sample.n());
}

inline double loglik_case2(const StepDistribution& F, const IcSample& sample) {
    return loglik_case2([&](double x) { return F.cdf(x); }, sample);
}

// ---------------------------------------------------------------------------
// Current status (case 1): the NPMLE is the isotonic regression of the
// indicator sequence ordered by observation time.

namespace detail {

// Weighted pool-adjacent-violators; returns the isotonic fit.
inline std::vector<double> pava(const std::vector<double>& y, const std::vector<double>& w) {
    std::size_t n = y.size();
    std::vector<double> level_sum, level_w;
    std::vector<std::size_t> level_count;
    level_sum.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = y[i] * w[i], ww = w[i];
        std::size_t cnt = 1;
        while (!level_sum.empty() &&
               level_sum.back() * (level_w.back() + ww) >= (level_sum.back() + s) * level_w.back()) {
            // pool while previous block mean >= new block mean
            s += level_sum.back();
            ww += level_w.back();
            cnt += level_count.back();
            level_sum.pop_back();
            level_w.pop_back();
            level_count.pop_back();
        }
        level_sum.push_back(s);
        level_w.push_back(ww);
        level_count.push_back(cnt);
    }
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t b = 0; b < level_sum.size(); ++b) {
        double mean = level_w[b] > 0.0 ? level_sum[b] / level_w[b] : 0.0;
        for (std::size_t k = 0; k < level_count[b]; ++k) out.push_back(mean);
    }
    return out;
}

}  // namespace detail

// Ties in z are broken by placing delta=0 before delta=1.
inline StepDistribution fit_current_status(std::vector<std::pair<double, int>> pairs) {
    if (pairs.empty()) throw std::invalid_argument("fit_current_status: empty input");
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    std::vector<double> y(pairs.size()), w(pairs.size(), 1.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) y[i] = pairs[i].second;
    std::vector<double> fit = detail::pava(y, w);
    std::vector<double> pts, masses;
    double prev = 0.0;
    for (std::size_t i = 0; i < fit.size(); ++i) {
        double v = std::clamp(fit[i], 0.0, 1.0);
        if (v > prev + 1e-15) {
            pts.push_back(pairs[i].first);
            masses.push_back(v - prev);
            prev = v;
        }
    }
    double M = pairs.back().first + 1.0;
    return StepDistribution(pts, masses, M);
}

// ---------------------------------------------------------------------------
// NPMLE for case 2 via the EM / iterative-convex-minorant hybrid on the
// maximal intersection intervals.

struct MaximalIntersections {
    // candidate interval j is (left_j, right_j] in the extended (value, side)
    // order; placement_j is the representative point carrying its mass
    std::vector<double> placement;
    // per observation: contiguous candidate index range [lo, hi], 0-based
    std::vector<int> lo, hi;
    double support_end = 1.0;
};

namespace detail {

// endpoint encoded as (value, side): side 0 = at value, 1 = just above
struct ExtPoint {
    double v;
    int side;
    bool operator<(const ExtPoint& o) const {
        if (v != o.v) return v < o.v;
        return side < o.side;
    }
    bool operator<=(const ExtPoint& o) const { return !(o < *this); }
};

}  // namespace detail

inline MaximalIntersections maximal_intersections(const IcSample& sample) {
    using detail::ExtPoint;
    const double INF = std::numeric_limits<double>::infinity();
    std::size_t n = sample.n();
    std::vector<ExtPoint> L(n), R(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& o = sample.obs[i];
        if (o.delta1) {
            L[i] = {0.0, 0};
            R[i] = {o.t, 0};
        } else if (o.delta2) {
            L[i] = {o.t, 1};
            R[i] = {o.u, 0};
        } else {
            L[i] = {o.u, 1};
            R[i] = {INF, 0};
        }
    }
    struct Event {
        ExtPoint p;
        int kind;  // 0 = left, 1 = right (lefts first at equal position)
    };
    std::vector<Event> ev;
    ev.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        ev.push_back({L[i], 0});
        ev.push_back({R[i], 1});
    }
    std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) {
        if (a.p < b.p) return true;
        if (b.p < a.p) return false;
        return a.kind < b.kind;
    });
    MaximalIntersections mi;
    std::vector<ExtPoint> cl, cr;  // candidate interval bounds
    bool open_left = false;
    ExtPoint last_left{0.0, 0};
    double max_u = 0.0;
    for (const auto& o : sample.obs) max_u = std::max(max_u, o.u);
    for (const auto& e : ev) {
        if (e.kind == 0) {
            last_left = e.p;
            open_left = true;
        } else if (open_left) {
            cl.push_back(last_left);
            cr.push_back(e.p);
            double place = std::isfinite(e.p.v) ? e.p.v : last_left.v + 1.0;
            mi.placement.push_back(place);
            open_left = false;
        }
    }
    mi.support_end = std::max(max_u, mi.placement.back()) + 1e-9;
    mi.lo.resize(n);
    mi.hi.resize(n);
    int m = static_cast<int>(mi.placement.size());
    for (std::size_t i = 0; i < n; ++i) {
        int lo = 0;
        while (lo < m && cl[lo] < L[i]) ++lo;
        int hi = m - 1;
        while (hi >= 0 && R[i] < cr[hi]) --hi;
        if (lo > hi) throw std::logic_error("maximal_intersections: empty range");
        mi.lo[i] = lo;
        mi.hi[i] = hi;
    }
    return mi;
}

struct FenchelResiduals {
    double max_violation;
    double support_slack;
};

struct IcFit {
    StepDistribution F;
    double loglik;
    int iterations;
    FenchelResiduals residuals;
};

namespace detail {

// directional derivatives D_j of the mean log-likelihood for adding mass at
// candidate j (renormalized); computed with a difference array in O(n+m)
inline std::vector<double> candidate_derivatives(const MaximalIntersections& mi,
                                                 const std::vector<double>& q, double n) {
    std::size_t m = mi.placement.size();
    std::vector<double> diff(m + 1, 0.0);
    for (std::size_t i = 0; i < q.size(); ++i) {
        double inv = 1.0 / q[i];
        diff[mi.lo[i]] += inv;
        diff[mi.hi[i] + 1] -= inv;
    }
    std::vector<double> d(m);
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        acc += diff[j];
        d[j] = acc / n - 1.0;
    }
    return d;
}

inline double loglik_from_q(const std::vector<double>& q) {
    double s = 0.0;
    for (double v : q) {
        if (!(v > 0.0)) return -std::numeric_limits<double>::infinity();
        s += std::log(v);
    }
    return s / static_cast<double>(q.size());
}

inline void fill_q(const MaximalIntersections& mi, const std::vector<double>& cum,
                   std::vector<double>& q) {
    for (std::size_t i = 0; i < q.size(); ++i) {
        double lo = mi.lo[i] == 0 ? 0.0 : cum[mi.lo[i] - 1];
        q[i] = cum[mi.hi[i]] - lo;
    }
}

}  // namespace detail

inline FenchelResiduals fenchel_residuals(const StepDistribution& F, const IcSample& sample) {
    sample.validate();
    auto mi = maximal_intersections(sample);
    auto Fc = [&](double x) { return F.cdf(x); };
    std::vector<double> q(sample.n());
    for (std::size_t i = 0; i < sample.n(); ++i) {
        q[i] = q_density(Fc, sample.obs[i]);
        if (!(q[i] > 0.0))
            return {std::numeric_limits<double>::infinity(),
                    std::numeric_limits<double>::infinity()};
    }
    auto d = detail::candidate_derivatives(mi, q, static_cast<double>(sample.n()));
    double viol = 0.0;
    for (double v : d) viol = std::max(viol, v);
    // slack at the support points of F
    double slack = 0.0;
    for (double x : F.jump_points()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < sample.n(); ++i) {
            const auto& o = sample.obs[i];
            bool inside = o.delta1 ? (x <= o.t) : o.delta2 ? (x > o.t && x <= o.u) : (x > o.u);
            if (inside) acc += 1.0 / q[i];
        }
        slack = std::max(slack, std::abs(acc / sample.n() - 1.0));
    }
    return {viol, slack};
}

inline IcFit fit_mle_case2(const IcSample& sample, double tol, int max_iter = 10000) {
    sample.validate();
    if (!(tol > 0.0)) throw std::invalid_argument("fit_mle_case2: tol must be positive");
    auto mi = maximal_intersections(sample);
    std::size_t m = mi.placement.size();
    std::size_t n = sample.n();
    double dn = static_cast<double>(n);

    std::vector<double> p(m, 1.0 / m);
    std::vector<double> cum(m), q(n);
    auto refresh_cum = [&]() {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            acc += p[j];
            cum[j] = acc;
        }
        cum[m - 1] = 1.0;  // pinned
    };
    refresh_cum();
    detail::fill_q(mi, cum, q);
    double ll = detail::loglik_from_q(q);

    FenchelResiduals res{1.0, 1.0};
    int iter = 0;
    std::vector<double> grad(m), w(m), target(m), y_new(m), q_try(n);
    for (; iter < max_iter; ++iter) {
        // EM (self-consistency) step
        auto d = detail::candidate_derivatives(mi, q, dn);
        for (std::size_t j = 0; j < m; ++j) p[j] *= (d[j] + 1.0);
        refresh_cum();
        detail::fill_q(mi, cum, q);
        double ll_em = detail::loglik_from_q(q);
        ll = std::max(ll, ll_em);

        // ICM step on the cumulative values y_1..y_{m-1} (y_m pinned at 1)
        if (m > 1) {
            std::fill(grad.begin(), grad.end(), 0.0);
            std::fill(w.begin(), w.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                double inv = 1.0 / q[i];
                double inv2 = inv * inv;
                int hi = mi.hi[i], lo = mi.lo[i] - 1;
                if (hi < static_cast<int>(m) - 1) {
                    grad[hi] += inv;
                    w[hi] += inv2;
                }
                if (lo >= 0) {
                    grad[lo] -= inv;
                    w[lo] += inv2;
                }
            }
            for (std::size_t k = 0; k + 1 < m; ++k) {
                double wk = std::max(w[k] / dn, 1e-10);
                target[k] = cum[k] + (grad[k] / dn) / wk;
                w[k] = wk;
            }
            std::vector<double> ysub(target.begin(), target.end() - 1);
            std::vector<double> wsub(w.begin(), w.end() - 1);
            auto iso = detail::pava(ysub, wsub);
            for (std::size_t k = 0; k + 1 < m; ++k)
                y_new[k] = std::clamp(iso[k], 0.0, 1.0);
            y_new[m - 1] = 1.0;

            // Armijo backtracking between current cum and the ICM proposal
            double dir_deriv = 0.0;
            for (std::size_t k = 0; k + 1 < m; ++k)
                dir_deriv += (grad[k] / dn) * (y_new[k] - cum[k]);
            double lambda = 1.0;
            for (int bt = 0; bt < 20; ++bt, lambda *= 0.5) {
                std::vector<double> cum_try(m);
                bool mono = true;
                double prev = 0.0;
                for (std::size_t k = 0; k < m; ++k) {
                    cum_try[k] = cum[k] + lambda * (y_new[k] - cum[k]);
                    if (cum_try[k] < prev - 1e-15) mono = false;
                    prev = cum_try[k];
                }
                if (!mono) continue;
                detail::fill_q(mi, cum_try, q_try);
                double ll_try = detail::loglik_from_q(q_try);
                if (ll_try >= ll + 1e-4 * lambda * dir_deriv && std::isfinite(ll_try)) {
                    cum = cum_try;
                    q = q_try;
                    ll = std::max(ll, ll_try);
                    double prevc = 0.0;
                    for (std::size_t k = 0; k < m; ++k) {
                        p[k] = std::max(cum[k] - prevc, 0.0);
                        prevc = cum[k];
                    }
                    break;
                }
            }
        }

        auto dfin = detail::candidate_derivatives(mi, q, dn);
        double viol = 0.0, slack = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            viol = std::max(viol, dfin[j]);
            if (p[j] > kMassTol) slack = std::max(slack, std::abs(dfin[j]));
        }
        res = {viol, slack};
        if (viol <= tol && slack <= tol) {
            ++iter;
            break;
        }
    }
    if (res.max_violation > tol || res.support_slack > tol)
        throw std::runtime_error("fit_mle_case2: iteration cap reached, residual " +
                                 std::to_string(std::max(res.max_violation, res.support_slack)));

    std::vector<double> pts, masses;
    for (std::size_t j = 0; j < m; ++j)
        if (p[j] > kMassTol) {
            pts.push_back(mi.placement[j]);
            masses.push_back(p[j]);
        }
    StepDistribution F(pts, masses, mi.support_end);
    return {F, loglik_case2(F, sample), iter, res};
}

}  // namespace iceq::icens
