#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "iceq/core.hpp"
#include "iceq/functionals.hpp"
#include "iceq/icens.hpp"
#include "iceq/quadrature.hpp"

namespace iceq::msle {

// triweight kernel and its partial moments over [-1, a]
inline double triweight(double x) {
    if (std::abs(x) >= 1.0) return 0.0;
    double s = 1.0 - x * x;
    return 35.0 / 32.0 * s * s * s;
}

namespace detail {

inline double tw_m0(double a) {
    auto P = [](double x) {
        return 35.0 / 32.0 *
               (x - x * x * x + 0.6 * std::pow(x, 5) - std::pow(x, 7) / 7.0);
    };
    return P(a) - P(-1.0);
}
inline double tw_m1(double a) {
    auto P = [](double x) {
        return 35.0 / 32.0 * (0.5 * x * x - 0.75 * std::pow(x, 4) + 0.5 * std::pow(x, 6) -
                              std::pow(x, 8) / 8.0);
    };
    return P(a) - P(-1.0);
}
inline double tw_m2(double a) {
    auto P = [](double x) {
        return 35.0 / 32.0 * (std::pow(x, 3) / 3.0 - 0.6 * std::pow(x, 5) +
                              3.0 / 7.0 * std::pow(x, 7) - std::pow(x, 9) / 9.0);
    };
    return P(a) - P(-1.0);
}

// Boundary-corrected kernel value at signed offset u for truncated support
// [-1, alpha]: a*K(u) + b*u*K(u) with zeroth moment 1 and first moment 0.
inline double boundary_kernel(double u, double alpha) {
    if (alpha >= 1.0) return triweight(u);
    if (u < -1.0 || u > alpha) return 0.0;
    double m0 = tw_m0(alpha), m1 = tw_m1(alpha), m2 = tw_m2(alpha);
    double det = m0 * m2 - m1 * m1;
    if (std::abs(det) < 1e-300) return triweight(u);
    double a = m2 / det, b = -m1 / det;
    return (a + b * u) * triweight(u);
}

// Kernel weight for estimating a density at point t from datum x on [0, M];
// offset convention u = (t - x)/bw, boundary corrections within bw of 0 or M.
inline double kernel_at(double t, double x, double bw, double M, bool boundary) {
    double u = (t - x) / bw;
    if (!boundary) return triweight(u) / bw;
    if (t < bw) return boundary_kernel(u, t / bw) / bw;
    if (t > M - bw) return boundary_kernel(-u, (M - t) / bw) / bw;
    return triweight(u) / bw;
}

}  // namespace detail

struct KernelSpec {
    double bandwidth;
    bool boundary = true;
};

struct SmoothedDensities {
    std::function<double(double)> h1;
    std::function<double(double)> h2;
    std::function<double(double, double)> h2d;  // arguments (t, u), t < u
    double bandwidth = 0.0;
    double M = 1.0;
    // h2d(t, u) vanishes for u - t below this gap (exact population inputs)
    double diag_gap = 0.0;
    bool population = false;
    std::shared_ptr<long> clamp_count = std::make_shared<long>(0);
    // fast tabulation of h2d on a node grid (outer product of kernel weights)
    std::function<Eigen::MatrixXd(const std::vector<double>&)> tabulate_h2d;
};

inline SmoothedDensities smooth_densities(const icens::IcSample& sample,
                                          const KernelSpec& kernel, double M = 1.0) {
    sample.validate();
    double b = kernel.bandwidth;
    if (!(b > 0.0 && b < M / 2.0))
        throw std::invalid_argument("smooth_densities: bandwidth out of (0, M/2)");
    bool bnd = kernel.boundary;
    auto obs = std::make_shared<std::vector<icens::IcObservation>>(sample.obs);
    double n = static_cast<double>(sample.n());

    SmoothedDensities sd;
    sd.bandwidth = b;
    sd.M = M;
    auto clamp = sd.clamp_count;
    auto clamp0 = [clamp](double v) {
        if (v < 0.0) {
            if (v < -1e-12) ++(*clamp);
            return 0.0;
        }
        return v;
    };
    sd.h1 = [obs, b, M, bnd, n, clamp0](double t) {
        double s = 0.0;
        for (const auto& o : *obs)
            if (o.delta1) s += detail::kernel_at(t, o.t, b, M, bnd);
        return clamp0(s / n);
    };
    sd.h2 = [obs, b, M, bnd, n, clamp0](double u) {
        double s = 0.0;
        for (const auto& o : *obs)
            if (!o.delta1 && !o.delta2) s += detail::kernel_at(u, o.u, b, M, bnd);
        return clamp0(s / n);
    };
    sd.h2d = [obs, b, M, bnd, n, clamp0](double t, double u) {
        double s = 0.0;
        for (const auto& o : *obs)
            if (o.delta2)
                s += detail::kernel_at(t, o.t, b, M, bnd) * detail::kernel_at(u, o.u, b, M, bnd);
        return clamp0(s / n);
    };
    sd.tabulate_h2d = [obs, b, M, bnd, n](const std::vector<double>& nodes) {
        std::vector<const icens::IcObservation*> mid;
        for (const auto& o : *obs)
            if (o.delta2) mid.push_back(&o);
        Eigen::Index m = static_cast<Eigen::Index>(nodes.size());
        Eigen::Index k = static_cast<Eigen::Index>(mid.size());
        Eigen::MatrixXd Kt(m, k), Ku(m, k);
        for (Eigen::Index j = 0; j < m; ++j)
            for (Eigen::Index i = 0; i < k; ++i) {
                Kt(j, i) = detail::kernel_at(nodes[j], mid[i]->t, b, M, bnd);
                Ku(j, i) = detail::kernel_at(nodes[j], mid[i]->u, b, M, bnd);
            }
        Eigen::MatrixXd H = (Kt * Ku.transpose()) / n;
        H = H.cwiseMax(0.0);
        return H;
    };
    return sd;
}

// Exact model densities h01 = F0 g1, h02 = (1-F0) g2, h0(t,u) = (F0(u)-F0(t)) g(t,u).
inline SmoothedDensities population_densities(const icens::ObservationModel& model,
                                              const Cdf& F0) {
    SmoothedDensities sd;
    sd.M = model.M;
    sd.population = true;
    sd.diag_gap = model.epsilon;
    auto F = F0.eval;
    sd.h1 = [model, F](double t) { return F(t) * model.g1(t); };
    sd.h2 = [model, F](double u) { return (1.0 - F(u)) * model.g2(u); };
    sd.h2d = [model, F](double t, double u) { return (F(u) - F(t)) * model.g(t, u); };
    sd.tabulate_h2d = [sd](const std::vector<double>& nodes) {
        Eigen::Index m = static_cast<Eigen::Index>(nodes.size());
        Eigen::MatrixXd H(m, m);
        for (Eigen::Index j = 0; j < m; ++j)
            for (Eigen::Index k = 0; k < m; ++k)
                H(j, k) = nodes[j] < nodes[k] ? sd.h2d(nodes[j], nodes[k]) : 0.0;
        return H;
    };
    return sd;
}

struct MsleFit {
    GridFunction F;
    double residual_sup = 0.0;
    int iterations = 0;
    int monotonicity_violations = 0;
};

// Damped fixed point on the explicit-F form of the stationarity equation
//   h1(t){1-F(t)} - h2(t)F(t) + F(t){1-F(t)} R(t) = 0,
// where R(t) is the signed integral of h2d against 1/|F-increment|.
inline MsleFit fit_msle(const SmoothedDensities& sd, int grid_size, double tol,
                        int max_iter = 5000, bool project_monotone = false) {
    if (!(tol > 0.0)) throw std::invalid_argument("fit_msle: tol must be positive");
    double M = sd.M;
    auto q = build_open_grid(0.0, M, grid_size);
    std::size_t m = q.nodes.size();
    std::vector<double> H1(m), H2(m);
    for (std::size_t j = 0; j < m; ++j) {
        H1[j] = sd.h1(q.nodes[j]);
        H2[j] = sd.h2(q.nodes[j]);
    }

    // naive ratio where both densities carry information; monotone ramps to
    // 0 and 1 outside, so no node starts in the spurious-root traps at the
    // boundaries (where one of h1, h2 vanishes identically)
    std::vector<double> F(m);
    std::size_t first = m, last = 0;
    for (std::size_t j = 0; j < m; ++j)
        if (H1[j] > 1e-8 && H2[j] > 1e-8) {
            if (first == m) first = j;
            last = j;
        }
    if (first == m) throw std::runtime_error("fit_msle: densities carry no information");
    for (std::size_t j = first; j <= last; ++j) F[j] = H1[j] / (H1[j] + H2[j]);
    for (std::size_t j = 0; j < first; ++j)
        F[j] = F[first] * q.nodes[j] / q.nodes[first];
    for (std::size_t j = last + 1; j < m; ++j)
        F[j] = F[last] + (1.0 - F[last]) * (q.nodes[j] - q.nodes[last]) /
                             (M - q.nodes[last]);

    auto interp = [&](double x) {
        // linear interpolation in the node tabulation, clamped at the ends
        if (x <= q.nodes.front()) return F.front();
        if (x >= q.nodes.back()) return F.back();
        auto it = std::upper_bound(q.nodes.begin(), q.nodes.end(), x);
        std::size_t i = static_cast<std::size_t>(it - q.nodes.begin());
        double t = (x - q.nodes[i - 1]) / (q.nodes[i] - q.nodes[i - 1]);
        return (1.0 - t) * F[i - 1] + t * F[i];
    };

    bool exact_path = sd.population && sd.diag_gap > 0.0;
    Eigen::MatrixXd H;
    if (!exact_path) H = sd.tabulate_h2d(q.nodes);

    if (!exact_path) {
        // Empirical kernel estimates put h2d mass arbitrarily close to the
        // diagonal, which makes the explicit-F update oscillate. Solve by
        // nonlinear Gauss-Seidel instead: the node criterion is +h1 at F=0,
        // -h2 at F=1 and continuous between the coupled neighbours, so a
        // coordinate root always exists and is found by bisection.
        std::vector<double> w(m, 1.0);
        F = icens::detail::pava(F, w);
        for (std::size_t j = 1; j < m; ++j)
            if (F[j] <= F[j - 1]) F[j] = F[j - 1] + 1e-9;
        for (auto& v : F) v = std::clamp(v, 1e-9, 1.0 - 1e-9);
        auto Ej = [&](std::size_t j, double f) {
            double acc = 0.0;
            for (std::size_t k = 0; k < j; ++k) {
                double d = f - F[k];
                if (H(k, j) > 0.0 && d > 0.0) acc += q.weights[k] * H(k, j) / d;
            }
            for (std::size_t k = j + 1; k < m; ++k) {
                double d = F[k] - f;
                if (H(j, k) > 0.0 && d > 0.0) acc -= q.weights[k] * H(j, k) / d;
            }
            return H1[j] * (1.0 - f) - H2[j] * f + f * (1.0 - f) * acc;
        };
        double res = std::numeric_limits<double>::infinity();
        int iter = 0;
        for (; iter < max_iter; ++iter) {
            for (std::size_t j = 0; j < m; ++j) {
                double lo = 0.0, hi = 1.0;
                for (std::size_t k = 0; k < j; ++k)
                    if (H(k, j) > 0.0) lo = std::max(lo, F[k]);
                // the bracket must respect every coupled upper neighbour,
                // not just the nearest one; iterates are not always monotone
                // across uncoupled stretches
                for (std::size_t k = j + 1; k < m; ++k)
                    if (H(j, k) > 0.0) hi = std::min(hi, F[k]);
                double a = lo + 1e-14, c = hi - 1e-14;
                if (c <= a) {
                    F[j] = 0.5 * (lo + hi);
                    continue;
                }
                if (Ej(j, a) <= 0.0) {
                    F[j] = a;
                    continue;
                }
                if (Ej(j, c) >= 0.0) {
                    F[j] = c;
                    continue;
                }
                for (int t = 0; t < 100; ++t) {
                    double mid = 0.5 * (a + c);
                    (Ej(j, mid) > 0.0 ? a : c) = mid;
                }
                F[j] = 0.5 * (a + c);
            }
            res = 0.0;
            for (std::size_t j = 0; j < m; ++j) res = std::max(res, std::abs(Ej(j, F[j])));
            if (res < tol) break;
        }
        if (res >= tol)
            throw std::runtime_error("fit_msle: iteration cap reached, residual " +
                                     std::to_string(res));
        int viol = 0;
        for (std::size_t j = 1; j < m; ++j)
            if (F[j] < F[j - 1] - 1e-10) ++viol;
        if (project_monotone) {
            F = icens::detail::pava(F, w);
            for (auto& v : F) v = std::clamp(v, 0.0, 1.0);
        }
        MsleFit out;
        out.F = GridFunction(q.nodes, F);
        out.residual_sup = res;
        out.iterations = iter;
        out.monotonicity_violations = viol;
        return out;
    }

    std::vector<double> R(m), E(m);
    auto compute_R = [&]() {
        if (exact_path) {
            // exact densities: split integration at the separation kink
            double gap = sd.diag_gap;
            int P = std::max(200, static_cast<int>(m));
            for (std::size_t j = 0; j < m; ++j) {
                double t = q.nodes[j], Ft = F[j];
                double lower = 0.0, upper = 0.0;
                if (t - gap > 0.0)
                    lower = midpoint_integrate(
                        [&](double v) {
                            double den = Ft - interp(v);
                            return den > 1e-12 ? sd.h2d(v, t) / den : 0.0;
                        },
                        0.0, t - gap, std::max(8, (int)((t - gap) / M * P)));
                if (t + gap < M)
                    upper = midpoint_integrate(
                        [&](double u) {
                            double den = interp(u) - Ft;
                            return den > 1e-12 ? sd.h2d(t, u) / den : 0.0;
                        },
                        t + gap, M, std::max(8, (int)((M - t - gap) / M * P)));
                R[j] = lower - upper;
            }
        } else {
            for (std::size_t j = 0; j < m; ++j) {
                double acc = 0.0, Ft = F[j];
                for (std::size_t k = 0; k < j; ++k) {
                    double den = Ft - F[k];
                    if (den > 1e-12) acc += q.weights[k] * H(k, j) / den;
                }
                for (std::size_t k = j + 1; k < m; ++k) {
                    double den = F[k] - Ft;
                    if (den > 1e-12) acc -= q.weights[k] * H(j, k) / den;
                }
                R[j] = acc;
            }
        }
    };

    double res = std::numeric_limits<double>::infinity();
    double best = res;
    int stagnant = 0;
    int iter = 0;
    for (; iter < max_iter; ++iter) {
        compute_R();
        res = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            E[j] = H1[j] * (1.0 - F[j]) - H2[j] * F[j] + F[j] * (1.0 - F[j]) * R[j];
            res = std::max(res, std::abs(E[j]));
        }
        if (res < tol) break;
        if (res < best * (1.0 - 1e-12)) {
            best = res;
            stagnant = 0;
        } else if (++stagnant > 500) {
            throw std::runtime_error("fit_msle: residual stagnation at " + std::to_string(res));
        }
        for (std::size_t j = 0; j < m; ++j) {
            double den = H1[j] + H2[j];
            if (den < 1e-12 && std::abs(R[j]) < 1e-12) continue;
            // for fixed R the equation is quadratic in F with a single root
            // in [0,1]; solving it exactly keeps the update stable where
            // h1 + h2 is small near the boundary
            double fnew;
            if (std::abs(R[j]) < 1e-12) {
                fnew = H1[j] / den;
            } else {
                // F = 1 (resp. 0) is a spurious root wherever h2 (resp. h1)
                // vanishes, so prefer the strictly interior root
                double a = -R[j], b = R[j] - den, c = H1[j];
                double disc = std::sqrt(std::max(b * b - 4.0 * a * c, 0.0));
                double qq = -0.5 * (b + (b >= 0.0 ? disc : -disc));
                double r1 = qq / a;
                double r2 = (std::abs(qq) > 1e-300) ? c / qq : r1;
                auto interior = [](double r) { return r > 1e-9 && r < 1.0 - 1e-9; };
                if (interior(r1) && interior(r2))
                    fnew = std::abs(r1 - F[j]) <= std::abs(r2 - F[j]) ? r1 : r2;
                else if (interior(r1))
                    fnew = r1;
                else if (interior(r2))
                    fnew = r2;
                else
                    // no interior root: the criterion is monotone in F(t)
                    fnew = (2.0 * H1[j] - 2.0 * H2[j] + R[j] > 0.0) ? 1.0 : 0.0;
            }
            fnew = std::clamp(fnew, 0.0, 1.0);
            F[j] += 0.5 * (fnew - F[j]);
        }
    }
    if (res >= tol)
        throw std::runtime_error("fit_msle: iteration cap reached, residual " +
                                 std::to_string(res));

    int viol = 0;
    for (std::size_t j = 1; j < m; ++j)
        if (F[j] < F[j - 1] - 1e-10) ++viol;
    if (project_monotone) {
        std::vector<double> w(m, 1.0);
        F = icens::detail::pava(F, w);
        for (auto& v : F) v = std::clamp(v, 0.0, 1.0);
    }
    MsleFit out;
    out.F = GridFunction(q.nodes, F);
    out.residual_sup = res;
    out.iterations = iter;
    out.monotonicity_violations = viol;
    return out;
}

namespace detail {

inline double d_F0(const icens::ObservationModel& model, const Cdf& F0, double t) {
    double F = F0.eval(t);
    double den = model.g1(t) * (1.0 - F) + model.g2(t) * F;
    if (den <= 0.0) throw std::runtime_error("observation density vanishes at t");
    return F * (1.0 - F) / den;
}

inline double sigma1(const icens::ObservationModel& model, const Cdf& F0, double t) {
    return 1.0 + d_F0(model, F0, t) *
                     (functionals::xi_k1(t, model, F0) + functionals::xi_k2(t, model, F0));
}

}  // namespace detail

// One linearized step started at F0: the explicit solution of the toy
// equation at the point t.
inline double toy_linearized(const SmoothedDensities& sd, const icens::ObservationModel& model,
                             const Cdf& F0, double t) {
    double M = model.M;
    if (!(t > 0.0 && t < M)) throw std::invalid_argument("toy_linearized: t outside (0,M)");
    double F = F0.eval(t);
    double den = model.g1(t) * (1.0 - F) + model.g2(t) * F;
    double d = detail::d_F0(model, F0, t);
    double s1 = detail::sigma1(model, F0, t);
    if (!(s1 > 0.0)) throw std::runtime_error("toy_linearized: nonpositive sigma1");

    double first = (sd.h1(t) * (1.0 - F) - sd.h2(t) * F) / den;
    auto qg = build_open_grid(0.0, M, 800, false, false, {t});
    double lower = 0.0, upper = 0.0;
    for (std::size_t j = 0; j < qg.nodes.size(); ++j) {
        double u = qg.nodes[j];
        if (u < t) {
            double dd = F - F0.eval(u);
            if (dd > 1e-12) lower += qg.weights[j] * sd.h2d(u, t) / dd;
        } else {
            double dd = F0.eval(u) - F;
            if (dd > 1e-12) upper += qg.weights[j] * sd.h2d(t, u) / dd;
        }
    }
    double rhs = first + d * (lower - upper);
    return F + rhs / s1;
}

struct BiasVariance {
    double beta;
    double sigma1;
    double var;
};

// Asymptotic bias and variance of the smoothed estimator at an interior
// point; second derivatives of the model densities by central differences.
inline BiasVariance asymptotic_bias_variance(double t, const icens::ObservationModel& model,
                                             const Cdf& F0, const KernelSpec& /*kernel*/) {
    double M = model.M;
    if (!(t > 0.0 && t < M))
        throw std::invalid_argument("asymptotic_bias_variance: t outside (0,M)");
    const double mu2 = 1.0 / 9.0;     // second moment of the triweight
    const double rK = 350.0 / 429.0;  // squared integral of the triweight
    double F = F0.eval(t);
    double den = model.g1(t) * (1.0 - F) + model.g2(t) * F;
    double d = detail::d_F0(model, F0, t);
    double s1 = detail::sigma1(model, F0, t);

    const double h = 1e-4;
    auto dd2 = [h](const std::function<double(double)>& f, double x) {
        return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
    };
    auto h01 = [&](double x) { return F0.eval(x) * model.g1(x); };
    auto h02 = [&](double x) { return (1.0 - F0.eval(x)) * model.g2(x); };
    double first = ((1.0 - F) * dd2(h01, t) - F * dd2(h02, t)) / den * mu2;

    double eps = std::max(model.epsilon, 1e-6);
    auto h0 = [&](double a, double b) { return (F0.eval(b) - F0.eval(a)) * model.g(a, b); };
    double lower = 0.0, upper = 0.0;
    // stop short of the separation kink so the difference stencil stays
    // inside the support
    double guard = 10.0 * h;
    if (t - eps - guard > 0.0)
        lower = midpoint_integrate(
            [&](double v) {
                double dF = F - F0.eval(v);
                return dF > 1e-12 ? dd2([&](double x) { return h0(v, x); }, t) / dF : 0.0;
            },
            0.0, t - eps - guard, 600);
    if (t + eps + guard < M)
        upper = midpoint_integrate(
            [&](double u) {
                double dF = F0.eval(u) - F;
                return dF > 1e-12 ? dd2([&](double x) { return h0(x, u); }, t) / dF : 0.0;
            },
            t + eps + guard, M, 600);
    double beta = first + d * (lower - upper) * mu2;
    double var = d / s1 * rK;
    return {beta, s1, var};
}

}  // namespace iceq::msle
