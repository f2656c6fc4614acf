#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iceq/core.hpp"
#include "iceq/fredholm.hpp"
#include "iceq/functionals.hpp"
#include "iceq/icens.hpp"
#include "iceq/quadrature.hpp"

namespace iceq::deconv {

inline constexpr double kDensityFloor = 1e-14;

// Decreasing convolution density on [0, support]; the Exponential family has
// unbounded support. `discontinuities` lists (location, upward jump) pairs of
// g, which drive the cube-root scaling constants.
struct ConvolutionKernel {
    enum class Family { Uniform, Exponential, Elbow, TabulatedDecreasing };
    Family family;
    std::function<double(double)> g;
    std::function<double(double)> gprime;  // empty for Uniform
    std::function<double(double)> cdf;     // w -> int_0^w g
    double g0 = 1.0;
    double support = 1.0;
    std::vector<std::pair<double, double>> discontinuities;
    std::string label;

    static ConvolutionKernel uniform() {
        ConvolutionKernel k;
        k.family = Family::Uniform;
        k.g = [](double w) { return (w >= 0.0 && w <= 1.0) ? 1.0 : 0.0; };
        k.gprime = nullptr;
        k.cdf = [](double w) { return std::clamp(w, 0.0, 1.0); };
        k.g0 = 1.0;
        k.support = 1.0;
        k.discontinuities = {{0.0, 1.0}, {1.0, -1.0}};
        k.label = "uniform";
        return k;
    }

    static ConvolutionKernel exponential() {
        ConvolutionKernel k;
        k.family = Family::Exponential;
        k.g = [](double w) { return w >= 0.0 ? std::exp(-w) : 0.0; };
        k.gprime = [](double w) { return w >= 0.0 ? -std::exp(-w) : 0.0; };
        k.cdf = [](double w) { return w > 0.0 ? 1.0 - std::exp(-w) : 0.0; };
        k.g0 = 1.0;
        k.support = std::numeric_limits<double>::infinity();
        k.discontinuities = {{0.0, 1.0}};
        k.label = "exponential";
        return k;
    }

    // g(x) = 2(1-x) on [0,1]
    static ConvolutionKernel elbow() {
        ConvolutionKernel k;
        k.family = Family::Elbow;
        k.g = [](double w) { return (w >= 0.0 && w <= 1.0) ? 2.0 * (1.0 - w) : 0.0; };
        k.gprime = [](double w) { return (w >= 0.0 && w < 1.0) ? -2.0 : 0.0; };
        k.cdf = [](double w) {
            if (w <= 0.0) return 0.0;
            if (w >= 1.0) return 1.0;
            return w * (2.0 - w);
        };
        k.g0 = 2.0;
        k.support = 1.0;
        k.discontinuities = {{0.0, 2.0}};
        k.label = "elbow";
        return k;
    }

    static ConvolutionKernel tabulated(GridFunction gv, GridFunction gpv) {
        ConvolutionKernel k;
        k.family = Family::TabulatedDecreasing;
        double lo = gv.front(), hi = gv.back();
        for (std::size_t i = 1; i < gv.values().size(); ++i)
            if (gv.values()[i] > gv.values()[i - 1] + 1e-10)
                throw std::invalid_argument("ConvolutionKernel: tabulated density not decreasing");
        for (double v : gv.values())
            if (v < -1e-12)
                throw std::invalid_argument("ConvolutionKernel: tabulated density negative");
        // cumulative trapezoid on the tabulation grid
        auto xs = gv.grid();
        auto vs = gv.values();
        std::vector<double> cum(xs.size(), 0.0);
        for (std::size_t i = 1; i < xs.size(); ++i)
            cum[i] = cum[i - 1] + 0.5 * (vs[i] + vs[i - 1]) * (xs[i] - xs[i - 1]);
        if (std::abs(cum.back() - 1.0) > 1e-3)
            throw std::invalid_argument("ConvolutionKernel: tabulated density does not integrate to 1");
        GridFunction cumf(xs, cum);
        k.g = [gv, lo, hi](double w) { return (w >= lo && w <= hi) ? std::max(0.0, gv.eval(w)) : 0.0; };
        k.gprime = [gpv, lo, hi](double w) { return (w > lo && w < hi) ? gpv.eval(w) : 0.0; };
        k.cdf = [cumf, lo, hi](double w) {
            if (w <= lo) return 0.0;
            if (w >= hi) return cumf.eval(hi);
            return cumf.eval(w);
        };
        k.g0 = gv.eval(lo);
        k.support = hi;
        k.discontinuities = {{lo, k.g0}};
        k.label = "tabulated";
        return k;
    }
};

struct DeconvSample {
    std::vector<double> z;

    std::size_t n() const { return z.size(); }

    void validate() const {
        if (z.empty()) throw std::invalid_argument("DeconvSample: empty sample");
        for (double v : z)
            if (!std::isfinite(v) || v < 0.0)
                throw std::invalid_argument("DeconvSample: observations must be finite and >= 0");
    }
};

struct MixtureFit {
    StepDistribution F;
    std::function<double(double)> hhat;
    double tau1 = 0.0;
    double taum = 0.0;
    double loglik = 0.0;
    int iterations = 0;
    long floor_hits = 0;
    // max_i |int_{z>=tau_i} g(z-tau_i)/hhat dHn - 1| over support points
    double support_residual = 0.0;
    // max over the candidate grid of the same integral minus 1
    double candidate_excess = 0.0;
};

// Density of the observations Z = X + Y under F0 and kernel g. Closed forms
// for the uniform kernel and for elbow/exponential with uniform F0, midpoint
// quadrature against f0 otherwise.
inline std::function<double(double)> h0_density(const Cdf& F0, const ConvolutionKernel& g) {
    if (g.family == ConvolutionKernel::Family::Uniform) {
        auto F = F0.eval;
        return [F](double z) { return std::max(0.0, F(z) - F(z - 1.0)); };
    }
    if (g.family == ConvolutionKernel::Family::Elbow && F0.label == "uniform") {
        return [](double z) {
            if (z <= 0.0 || z >= 2.0) return 0.0;
            if (z <= 1.0) return z * (2.0 - z);
            return (2.0 - z) * (2.0 - z);
        };
    }
    if (g.family == ConvolutionKernel::Family::Exponential && F0.label == "uniform") {
        return [](double z) {
            if (z <= 0.0) return 0.0;
            return std::exp(-z) * (std::exp(std::min(z, 1.0)) - 1.0);
        };
    }
    if (!F0.density) throw std::invalid_argument("h0_density: F0 density required");
    double a = F0.a, b = F0.b, S = g.support;
    auto gg = g.g;
    auto f0 = F0.density;
    return [=](double z) {
        double lo = std::isfinite(S) ? std::max(a, z - S) : a;
        double hi = std::min(b, z);
        if (hi <= lo) return 0.0;
        return midpoint_integrate([&](double x) { return gg(z - x) * f0(x); }, lo, hi, 400);
    };
}

// Uniform-kernel observations map to current status data: Delta = 1_{z<=1},
// with the observation time folded back into [0,1].
inline std::vector<std::pair<double, int>> uniform_to_current_status(const DeconvSample& sample) {
    sample.validate();
    std::vector<std::pair<double, int>> out;
    out.reserve(sample.n());
    for (double z : sample.z) {
        if (z > 2.0) throw std::invalid_argument("uniform_to_current_status: z outside [0,2]");
        if (z <= 1.0)
            out.emplace_back(z, 1);
        else
            out.emplace_back(z - 1.0, 0);
    }
    return out;
}

inline double current_status_variance(const Cdf& F0) {
    return midpoint_integrate(
        [&](double t) {
            double F = F0.eval(t);
            return F * (1.0 - F);
        },
        F0.a, F0.b, 2000);
}

namespace detail {

struct MixtureState {
    std::vector<double> tau;
    std::vector<double> p;
};

inline double mixture_loglik(const std::vector<double>& hh) {
    double s = 0.0;
    for (double h : hh) s += h > 0.0 ? std::log(h) : -1e300;
    return s / hh.size();
}

inline void mixture_hhat(const MixtureState& st, const ConvolutionKernel& g,
                         const std::vector<double>& z, std::vector<double>& hh) {
    hh.assign(z.size(), 0.0);
    for (std::size_t k = 0; k < st.tau.size(); ++k)
        for (std::size_t i = 0; i < z.size(); ++i) hh[i] += st.p[k] * g.g(z[i] - st.tau[k]);
}

// Golden-section maximization on [lo, hi].
template <class F>
double golden_max(F&& f, double lo, double hi, int iters = 60) {
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi - r * (hi - lo), x2 = lo + r * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    for (int i = 0; i < iters && hi - lo > 1e-14; ++i) {
        if (f1 < f2) {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Mixture MLE by support reduction: candidates are the observations and the
// observations shifted down by the kernel support (clipped), plus a coarse
// uniform grid; the best candidate is polished by golden section before it
// enters the support, and the restricted weight problem is solved by EM
// steps interleaved with constrained Newton steps.
inline MixtureFit fit_mle_deconv(const DeconvSample& sample, const ConvolutionKernel& g,
                                 double tol, int max_outer = 1500) {
    sample.validate();
    if (!(tol > 0.0)) throw std::invalid_argument("fit_mle_deconv: tol must be positive");
    std::size_t n = sample.n();

    auto finalize = [&](const StepDistribution& F, int iters, long floor_hits) {
        MixtureFit fit;
        fit.F = F;
        auto taus = F.jump_points();
        auto ps = F.masses();
        fit.hhat = [taus, ps, gg = g.g](double z) {
            double s = 0.0;
            for (std::size_t k = 0; k < taus.size(); ++k) s += ps[k] * gg(z - taus[k]);
            return s;
        };
        fit.tau1 = taus.front();
        fit.taum = taus.back();
        fit.iterations = iters;
        fit.floor_hits = floor_hits;
        std::vector<double> hh(n);
        for (std::size_t i = 0; i < n; ++i) hh[i] = std::max(fit.hhat(sample.z[i]), kDensityFloor);
        fit.loglik = detail::mixture_loglik(hh);
        for (double t : taus) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += g.g(sample.z[i] - t) / hh[i];
            fit.support_residual = std::max(fit.support_residual, std::abs(s / n - 1.0));
        }
        return fit;
    };

    if (g.family == ConvolutionKernel::Family::Uniform) {
        // exact reduction to the current status NPMLE
        StepDistribution F = icens::fit_current_status(uniform_to_current_status(sample));
        return finalize(F, 0, 0);
    }

    std::vector<double> z = sample.z;
    std::sort(z.begin(), z.end());
    double zmax = z.back();
    if (zmax <= 0.0) throw std::invalid_argument("fit_mle_deconv: degenerate sample at 0");

    std::vector<double> cand;
    cand.reserve(2 * n + 260);
    double S = std::isfinite(g.support) ? g.support : 0.0;
    for (double v : z) {
        cand.push_back(std::min(v, zmax));
        cand.push_back(std::clamp(v - std::max(S, 1.0), 0.0, zmax));
    }
    for (int i = 0; i <= 256; ++i) cand.push_back(zmax * i / 256.0);
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end(),
                           [](double a, double b) { return b - a < 1e-12; }),
               cand.end());
    std::size_t nc = cand.size();

    Eigen::MatrixXd Gc(nc, n);
    for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t i = 0; i < n; ++i) Gc(c, i) = g.g(z[i] - cand[c]);

    // initial support: the best single-point fit on the candidate grid
    detail::MixtureState st;
    {
        std::size_t best = 0;
        double bestll = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < nc; ++c) {
            double ll = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double v = Gc(c, i);
                ll += v > 0.0 ? std::log(v) : -1e300;
            }
            if (ll > bestll) {
                bestll = ll;
                best = c;
            }
        }
        st.tau = {cand[best]};
        st.p = {1.0};
    }

    long floor_hits = 0;
    std::vector<double> hh, s;
    // kernel rows cached for the current support so the inner loop stays in
    // plain linear algebra
    Eigen::MatrixXd Gs;
    std::vector<double> gs_tau;
    auto sync_rows = [&]() {
        if (st.tau == gs_tau) return;
        gs_tau = st.tau;
        Gs.resize(static_cast<Eigen::Index>(st.tau.size()), static_cast<Eigen::Index>(n));
        for (std::size_t k = 0; k < st.tau.size(); ++k)
            for (std::size_t i = 0; i < n; ++i) Gs(k, i) = g.g(z[i] - st.tau[k]);
    };
    auto compute_hh = [&]() {
        sync_rows();
        hh.assign(n, 0.0);
        Eigen::Map<Eigen::VectorXd> h(hh.data(), static_cast<Eigen::Index>(n));
        h = Gs.transpose() * Eigen::Map<const Eigen::VectorXd>(st.p.data(),
                                                               static_cast<Eigen::Index>(st.p.size()));
        for (double& v : hh) {
            if (v < kDensityFloor) {
                v = kDensityFloor;
                ++floor_hits;
            }
        }
    };
    auto support_scores = [&]() {
        Eigen::VectorXd invh(n);
        for (std::size_t i = 0; i < n; ++i) invh[i] = 1.0 / hh[i];
        Eigen::VectorXd sc = Gs * invh / double(n);
        s.assign(sc.data(), sc.data() + sc.size());
    };
    auto dir_deriv = [&](double x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g.g(z[i] - x) / hh[i];
        return acc / n - 1.0;
    };

    double ll_prev = -std::numeric_limits<double>::infinity();
    int outer = 0;
    double max_excess = 0.0;
    for (; outer < max_outer; ++outer) {
        // restricted weight problem on the current support
        for (int inner = 0; inner < 3000; ++inner) {
            compute_hh();
            support_scores();
            double dev = 0.0;
            for (std::size_t k = 0; k < st.p.size(); ++k)
                if (st.p[k] > 0.0) dev = std::max(dev, std::abs(s[k] - 1.0));
            if (dev <= 0.5 * tol) break;
            // EM step
            double tot = 0.0;
            for (std::size_t k = 0; k < st.p.size(); ++k) {
                st.p[k] *= s[k];
                tot += st.p[k];
            }
            for (double& pk : st.p) pk /= tot;
            if (inner % 5 == 4 && st.p.size() > 1) {
                // constrained Newton step on the simplex
                compute_hh();
                support_scores();
                std::size_t m = st.p.size();
                Eigen::MatrixXd G = Gs;
                for (std::size_t i = 0; i < n; ++i) G.col(i) /= hh[i];
                Eigen::MatrixXd H = G * G.transpose() / double(n);
                Eigen::VectorXd grad(m);
                for (std::size_t k = 0; k < m; ++k) grad[k] = s[k] - 1.0;
                Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m + 1, m + 1);
                K.topLeftCorner(m, m) = H + 1e-12 * Eigen::MatrixXd::Identity(m, m);
                K.topRightCorner(m, 1).setOnes();
                K.bottomLeftCorner(1, m).setOnes();
                Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 1);
                rhs.head(m) = grad;
                Eigen::VectorXd sol = K.partialPivLu().solve(rhs);
                double ll0 = detail::mixture_loglik(hh);
                double alpha = 1.0;
                std::vector<double> p0 = st.p;
                bool accepted = false;
                for (int h = 0; h < 25; ++h) {
                    bool ok = true;
                    for (std::size_t k = 0; k < m; ++k) {
                        st.p[k] = p0[k] + alpha * sol[k];
                        if (st.p[k] < 0.0) ok = false;
                    }
                    if (ok) {
                        compute_hh();
                        if (detail::mixture_loglik(hh) >= ll0) {
                            accepted = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if (!accepted) st.p = p0;
            }
        }
        // drop vanished support points
        for (std::size_t k = st.p.size(); k-- > 0;) {
            if (st.p[k] < kMassTol) {
                st.tau.erase(st.tau.begin() + k);
                st.p.erase(st.p.begin() + k);
            }
        }
        compute_hh();
        support_scores();
        double dev = 0.0;
        for (double sk : s) dev = std::max(dev, std::abs(sk - 1.0));
        double ll = detail::mixture_loglik(hh);
        if (ll < ll_prev - 1e-10)
            throw std::runtime_error("fit_mle_deconv: log-likelihood decreased");
        ll_prev = ll;

        // directional derivative over the candidate grid
        Eigen::VectorXd invh(n);
        for (std::size_t i = 0; i < n; ++i) invh[i] = 1.0 / hh[i];
        Eigen::VectorXd D = Gc * invh / double(n) - Eigen::VectorXd::Ones(nc);
        Eigen::Index jmax = 0;
        double dmax = D.maxCoeff(&jmax);
        double blo = jmax > 0 ? cand[jmax - 1] : cand[jmax];
        double bhi = std::size_t(jmax) + 1 < nc ? cand[jmax + 1] : cand[jmax];
        double xstar = detail::golden_max(dir_deriv, blo, bhi);
        double dstar = std::max(dmax, dir_deriv(xstar));
        max_excess = dstar;
        if (dstar <= tol && dev <= tol) break;
        if (dir_deriv(xstar) < dmax) xstar = cand[jmax];

        // add the new point by a halving line search toward its vertex
        double ll0 = ll;
        std::vector<double> tau0 = st.tau, p0 = st.p;
        bool added = false;
        for (double lam = 0.5; lam > 1e-12; lam *= 0.5) {
            st.tau = tau0;
            st.p = p0;
            for (double& pk : st.p) pk *= 1.0 - lam;
            auto it = std::lower_bound(st.tau.begin(), st.tau.end(), xstar);
            if (it != st.tau.end() && std::abs(*it - xstar) < 1e-12) {
                st.p[it - st.tau.begin()] += lam;
            } else {
                st.p.insert(st.p.begin() + (it - st.tau.begin()), lam);
                st.tau.insert(it, xstar);
            }
            compute_hh();
            if (detail::mixture_loglik(hh) >= ll0) {
                added = true;
                break;
            }
        }
        if (!added) {
            st.tau = tau0;
            st.p = p0;
            if (dev <= tol) break;  // no improving direction left
        }
    }
    if (outer >= max_outer)
        throw std::runtime_error("fit_mle_deconv: iteration cap reached");

    StepDistribution F(st.tau, st.p, std::max(zmax, st.tau.back()) + 1e-9);
    MixtureFit fit = finalize(F, outer + 1, floor_hits);
    fit.candidate_excess = max_excess;
    return fit;
}

namespace detail {

// Kernel A of the differentiated adjoint equation,
//   A(x,u) = g'(x-u)/g0 + h0(x) g'(u-x) / (g0 h0(u))
//          + h0(x)/g0^2 * int_{x v u}^{S + x ^ u} g'(z-u) g'(z-x) / h0(z) dz,
// with the first term taken zero on the diagonal and the second including it.
struct DeconKernel {
    std::function<double(double, double)> A;
    std::function<double(double)> h0;
    double g0;
};

inline DeconKernel make_kernel(const Cdf& F0, const ConvolutionKernel& g) {
    if (g.family == ConvolutionKernel::Family::Uniform)
        throw std::invalid_argument("deconv kernel: uniform g has no derivative; use the current status reduction");
    DeconKernel K;
    K.h0 = h0_density(F0, g);
    K.g0 = g.g0;
    double g0 = g.g0;

    if (g.family == ConvolutionKernel::Family::Elbow && F0.label == "uniform") {
        K.A = [](double x, double u) {
            double M = std::max(x, u), m = std::min(x, u);
            double v = x * (2.0 - x) * (0.5 * std::log((2.0 - M) / M) + m / (1.0 - m));
            if (u < x) v -= 1.0;
            if (u >= x && u < 1.0) v -= x * (2.0 - x) / (u * (2.0 - u));
            return v;
        };
        return K;
    }

    auto h0 = K.h0;
    auto gp_open = [g](double w) { return w > 0.0 && w < g.support ? g.gprime(w) : 0.0; };
    auto gp_closed = [g](double w) { return w >= 0.0 && w < g.support ? g.gprime(w) : 0.0; };

    if (g.family == ConvolutionKernel::Family::Exponential) {
        // g'(z-u) g'(z-x) = e^{x+u} e^{-2z}, so the z-integral separates:
        // I(x,u) = e^{x+u} J(x v u) with J(w) = int_w^inf e^{-2z}/h0(z) dz.
        // Beyond the F0 support h0(z) = C e^{-z} exactly, giving a closed tail.
        double a = F0.a, b = F0.b;
        if (!F0.density) throw std::invalid_argument("deconv kernel: F0 density required");
        double C = midpoint_integrate([&](double x) { return std::exp(x) * F0.density(x); }, a,
                                      b, 4000);
        int N = 16000;
        auto boundary = std::make_shared<std::vector<double>>(N + 1);
        auto Jtab = std::make_shared<std::vector<double>>(N + 1);
        for (int j = 0; j <= N; ++j) {
            double t = double(j) / N;
            (*boundary)[j] = a + (b - a) * t * t * t;  // graded toward the 1/h0 blow-up at a
        }
        auto f = [&](double zz) { return std::exp(-2.0 * zz) / h0(zz); };
        (*Jtab)[N] = std::exp(-b) / C;
        for (int j = N; j-- > 0;) {
            double lo = (*boundary)[j], hi = (*boundary)[j + 1];
            double seg = (hi - lo) / 6.0 * (f(lo + 1e-14 * (b - a)) + 4.0 * f(0.5 * (lo + hi)) + f(hi));
            if (j == 0) seg = midpoint_integrate(f, lo, hi, 64);  // endpoint singular
            (*Jtab)[j] = (*Jtab)[j + 1] + seg;
        }
        auto J = [boundary, Jtab, a, b, C](double w) {
            if (w >= b) return std::exp(-w) / C;
            if (w <= (*boundary)[1]) return (*Jtab)[1];
            auto it = std::upper_bound(boundary->begin(), boundary->end(), w);
            std::size_t i = it - boundary->begin();
            double lo = (*boundary)[i - 1], hi = (*boundary)[i];
            double t = (w - lo) / (hi - lo);
            return (1.0 - t) * (*Jtab)[i - 1] + t * (*Jtab)[i];
        };
        K.A = [=](double x, double u) {
            double inner = std::exp(x + u) * J(std::max(x, u));
            return gp_open(x - u) / g0 + h0(x) * gp_closed(u - x) / (g0 * h0(u)) +
                   h0(x) * inner / (g0 * g0);
        };
        return K;
    }

    // compact support, generic: per-pair midpoint rule on the z-integral
    double S = g.support;
    K.A = [=](double x, double u) {
        double lo = std::max(x, u), hi = S + std::min(x, u);
        double inner = midpoint_integrate(
            [&](double zz) {
                double hz = h0(zz);
                return hz > kDensityFloor ? gp_open(zz - u) * gp_open(zz - x) / hz : 0.0;
            },
            lo, hi, 200);
        return gp_open(x - u) / g0 + h0(x) * gp_closed(u - x) / (g0 * h0(u)) +
               h0(x) * inner / (g0 * g0);
    };
    return K;
}

// Exact integral of g(z-u) against the piecewise-linear density of phi over
// [p, q]: slope * (G(z-p) - G(z-q)).
inline double seg_integral(const ConvolutionKernel& g, double z, double p, double q,
                           double slope) {
    if (slope == 0.0 || q <= p) return 0.0;
    return slope * (g.cdf(z - p) - g.cdf(z - q));
}

// int_{[0,z]} g(z-u) dphi(u) for a grid-tabulated phi with phi(lo) = 0 and
// constant extension past the last node.
struct PhiMeasure {
    std::vector<double> xs;      // segment boundaries, xs.front() = lo
    std::vector<double> slopes;  // per segment

    static PhiMeasure from_grid(const GridFunction& phi, double lo) {
        PhiMeasure m;
        const auto& x = phi.grid();
        const auto& v = phi.values();
        m.xs.push_back(lo);
        double prev = 0.0;
        if (x.front() > lo + 1e-15) {
            m.xs.push_back(x.front());
            m.slopes.push_back(v.front() / (x.front() - lo));
            prev = v.front();
        } else {
            m.xs.back() = x.front();
            prev = v.front();
            // mass below the first node collapses onto it; treated as a
            // steep first segment from lo
        }
        for (std::size_t i = 1; i < x.size(); ++i) {
            m.xs.push_back(x[i]);
            m.slopes.push_back((v[i] - prev) / (x[i] - x[i - 1]));
            prev = v[i];
        }
        return m;
    }

    double convolve(const ConvolutionKernel& g, double z) const {
        double s = 0.0;
        for (std::size_t i = 0; i < slopes.size(); ++i) {
            if (xs[i] >= z) break;
            s += seg_integral(g, z, xs[i], std::min(xs[i + 1], z), slopes[i]);
        }
        return s;
    }
};

}  // namespace detail

// Efficiency equation for a smooth functional:
//   phi(x) + int_0^1 A(x,u) phi(u) du = -h0(x) kappa'(x) / g0^2.
inline fredholm::FredholmProblem phi_deconv_problem(const Cdf& F0, const ConvolutionKernel& g,
                                                    const FunctionalSpec& spec) {
    spec.validate(F0.a, F0.b);
    auto K = detail::make_kernel(F0, g);
    fredholm::FredholmProblem p;
    p.kernel = K.A;
    p.a = F0.a;
    p.b = F0.b;
    double g0sq = K.g0 * K.g0;
    auto h0 = K.h0;
    auto kp = spec.gradient_derivative;
    p.rhs = [h0, kp, g0sq](double x) { return -h0(x) * kp(x) / g0sq; };
    p.singular_left = true;
    p.singular_right = true;
    return p;
}

inline fredholm::FredholmSolution solve_phi_deconv(const Cdf& F0, const ConvolutionKernel& g,
                                                   const FunctionalSpec& spec, int grid_size) {
    return fredholm::solve_second_kind(phi_deconv_problem(F0, g, spec), grid_size);
}

struct ThetaVariance {
    GridFunction theta;
    std::function<double(double)> theta_eval;
    double variance = 0.0;
    double mean = 0.0;  // int theta dH0, zero in exact arithmetic
};

// theta(z) = int_{[0,z]} g(z-u) dphi(u) / h0(z); variance = int theta^2 h0
// with geometric refinement toward the right endpoint where theta blows up.
inline ThetaVariance theta_and_variance_deconv(const GridFunction& phi, const Cdf& F0,
                                               const ConvolutionKernel& g) {
    auto h0 = h0_density(F0, g);
    double zhi = std::isfinite(g.support) ? F0.b + g.support : F0.b + 8.0;
    auto pm = detail::PhiMeasure::from_grid(phi, F0.a);

    auto num = [pm, &g](double z) { return pm.convolve(g, z); };
    auto theta = [num, h0](double z) {
        double h = h0(z);
        double v = num(z);
        if (h < kDensityFloor) return 0.0;
        return v / h;
    };

    ThetaVariance out;
    auto grid = build_open_grid(0.0, zhi, 800, false, true);
    std::vector<double> tv(grid.nodes.size());
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = theta(grid.nodes[i]);
    out.theta = GridFunction(grid.nodes, tv);
    out.theta_eval = theta;
    out.variance = refine_toward_upper(
        [&](double z) {
            double h = h0(z);
            if (h < kDensityFloor) return 0.0;
            double v = num(z);
            return v * v / h;
        },
        0.0, zhi, 2000);
    out.mean = refine_toward_upper(num, 0.0, zhi, 2000);
    return out;
}

struct BarPhiResult {
    functionals::PhiFunction bar_phi;
    GridFunction bar_theta;
    std::function<double(double)> bar_theta_eval;
    double orthogonality = 0.0;  // int bar_theta dHn
};

// Matrix form of the adjoint equation at the jump points of the fit:
//   sum_k B(tau_j, tau_k) dphi_k = kappa(tau_j) - int kappa dF,
// B(t,s) = int_{z >= t v s} g(z-s) g(z-t) / hhat(z) dz. Columns of the
// quadrature matrix are normalized so that the exact identity
// sum_j p_j B(tau_j, tau_k) = 1 holds in the discretization, which forces
// sum_k dphi_k = 0 and hence int bar_theta dHn = 0 up to the Fenchel
// tolerance of the fit.
inline BarPhiResult bar_phi_matrix(const MixtureFit& fit, const DeconvSample& sample,
                                   const ConvolutionKernel& g, const FunctionalSpec& spec) {
    sample.validate();
    const auto& taus = fit.F.jump_points();
    const auto& ps = fit.F.masses();
    std::size_t m = taus.size();
    if (m == 0) throw std::invalid_argument("bar_phi_matrix: empty fit");

    double zhi = std::isfinite(g.support) ? g.support + taus.back() : taus.back() + 12.0;
    std::vector<double> brk(taus.begin(), taus.end());
    if (std::isfinite(g.support))
        for (double t : taus) brk.push_back(t + g.support);
    auto q = build_open_grid(taus.front(), zhi, 2000, false, true, brk);
    std::size_t nq = q.nodes.size();
    std::vector<double> hh(nq);
    for (std::size_t l = 0; l < nq; ++l) hh[l] = std::max(fit.hhat(q.nodes[l]), kDensityFloor);

    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(m, m);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = j; k < m; ++k) {
            double cut = std::max(taus[j], taus[k]);
            double acc = 0.0;
            for (std::size_t l = 0; l < nq; ++l) {
                if (q.nodes[l] <= cut) continue;
                acc += q.weights[l] * g.g(q.nodes[l] - taus[k]) * g.g(q.nodes[l] - taus[j]) /
                       hh[l];
            }
            B(j, k) = B(k, j) = acc;
        }
    // calibrate columns to the exact identity sum_j p_j B(.,k) = 1
    for (std::size_t k = 0; k < m; ++k) {
        double ck = 0.0;
        for (std::size_t j = 0; j < m; ++j) ck += ps[j] * B(j, k);
        if (!(ck > 0.0)) throw std::runtime_error("bar_phi_matrix: degenerate column");
        B.col(k) /= ck;
    }

    double kbar = integrate_against(fit.F, spec.gradient);
    Eigen::VectorXd r(m);
    for (std::size_t j = 0; j < m; ++j) r[j] = spec.gradient(taus[j]) - kbar;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(B);
    Eigen::VectorXd dphi = lu.solve(r);
    if ((B * dphi - r).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + r.cwiseAbs().maxCoeff()))
        throw std::runtime_error("bar_phi_matrix: singular system (coincident support points)");

    std::vector<double> tau_copy(taus.begin(), taus.end());
    std::vector<double> cum(m);
    std::partial_sum(dphi.data(), dphi.data() + m, cum.begin());
    auto eval_right = [tau_copy, cum](double x) {
        auto it = std::upper_bound(tau_copy.begin(), tau_copy.end(), x);
        if (it == tau_copy.begin()) return 0.0;
        return cum[(it - tau_copy.begin()) - 1];
    };
    auto eval_left = [tau_copy, cum](double x) {
        auto it = std::lower_bound(tau_copy.begin(), tau_copy.end(), x);
        if (it == tau_copy.begin()) return 0.0;
        return cum[(it - tau_copy.begin()) - 1];
    };

    BarPhiResult out;
    out.bar_phi.eval_right = eval_right;
    out.bar_phi.eval_left = eval_left;
    for (std::size_t k = 0; k < m; ++k)
        out.bar_phi.discrete_jumps.push_back({taus[k], dphi[k]});
    {
        double lo = std::max(0.0, taus.front() - 0.05);
        double hi = taus.back() + 0.05;
        std::vector<double> xs(513), vs(513);
        for (int i = 0; i <= 512; ++i) {
            xs[i] = lo + (hi - lo) * i / 512.0;
            vs[i] = eval_right(xs[i]);
        }
        out.bar_phi.smooth_part = GridFunction(xs, vs);
    }

    std::vector<double> dphi_v(dphi.data(), dphi.data() + m);
    auto hhat = fit.hhat;
    double t1 = taus.front();
    auto bar_theta = [tau_copy, dphi_v, hhat, t1, zhi, gg = g.g](double z) {
        if (z < t1 || z >= zhi) return 0.0;
        double h = hhat(z);
        if (h < kDensityFloor) return 0.0;
        double s = 0.0;
        for (std::size_t k = 0; k < tau_copy.size(); ++k) s += dphi_v[k] * gg(z - tau_copy[k]);
        return s / h;
    };
    out.bar_theta_eval = bar_theta;
    std::vector<double> tv(nq);
    for (std::size_t l = 0; l < nq; ++l) tv[l] = bar_theta(q.nodes[l]);
    out.bar_theta = GridFunction(q.nodes, tv);

    double orth = 0.0;
    for (double zi : sample.z) orth += bar_theta(zi);
    out.orthogonality = orth / sample.n();
    if (std::abs(out.orthogonality) > 1e-6)
        throw std::runtime_error("bar_phi_matrix: orthogonality check failed");
    return out;
}

// phi equation driven by the fitted mixture density on [tau1, taum]:
//   phi(x) + int A_n(x,u) phi(u) du = -hhat(x) kappa'(x) / g0^2.
inline fredholm::FredholmSolution solve_phi_mixture(const MixtureFit& fit,
                                                    const ConvolutionKernel& g,
                                                    const FunctionalSpec& spec, int grid_size) {
    if (g.family == ConvolutionKernel::Family::Uniform)
        throw std::invalid_argument("solve_phi_mixture: uniform g has no derivative");
    double t1 = fit.tau1, tm = fit.taum;
    if (!(tm > t1)) throw std::invalid_argument("solve_phi_mixture: single-point fit");
    auto hh = [h = fit.hhat](double z) { return std::max(h(z), kDensityFloor); };
    double g0 = g.g0;

    std::function<double(double, double)> A;
    if (g.family == ConvolutionKernel::Family::Elbow) {
        // g' = -2, so the z-integral is 4 * int dz/hhat; precompute the
        // cumulative on a graded grid (hhat vanishes linearly at 1+taum)
        std::vector<double> brk(fit.F.jump_points());
        for (double t : fit.F.jump_points()) brk.push_back(t + 1.0);
        auto zq = build_open_grid(t1, 1.0 + tm, 8000, false, true, brk, 24);
        auto bounds = std::make_shared<std::vector<double>>();
        auto cumv = std::make_shared<std::vector<double>>();
        bounds->push_back(t1);
        cumv->push_back(0.0);
        double acc = 0.0, pos = t1;
        for (std::size_t l = 0; l < zq.nodes.size(); ++l) {
            acc += zq.weights[l] / hh(zq.nodes[l]);
            pos = 2.0 * zq.nodes[l] - pos;
            bounds->push_back(pos);
            cumv->push_back(acc);
        }
        auto cum = [bounds, cumv](double w) {
            if (w <= bounds->front()) return 0.0;
            if (w >= bounds->back()) return cumv->back();
            auto it = std::upper_bound(bounds->begin(), bounds->end(), w);
            std::size_t i = it - bounds->begin();
            double lo = (*bounds)[i - 1], hi = (*bounds)[i];
            double t = (w - lo) / (hi - lo);
            return (1.0 - t) * (*cumv)[i - 1] + t * (*cumv)[i];
        };
        A = [hh, cum, t1](double x, double u) {
            double M = std::max(x, u), mn = std::min(x, u);
            double v = hh(x) * (cum(1.0 + mn) - cum(std::max(M, t1)));
            if (u < x && x - u < 1.0) v -= 1.0;
            if (u >= x && u - x < 1.0) v -= hh(x) / hh(u);
            return v;
        };
    } else {
        auto gp_open = [g](double w) { return w > 0.0 && w < g.support ? g.gprime(w) : 0.0; };
        auto gp_closed = [g](double w) { return w >= 0.0 && w < g.support ? g.gprime(w) : 0.0; };
        double S = std::isfinite(g.support) ? g.support : 12.0;
        A = [=](double x, double u) {
            double lo = std::max(x, u), hi = S + std::min(x, u);
            double inner = midpoint_integrate(
                [&](double zz) { return gp_open(zz - u) * gp_open(zz - x) / hh(zz); }, lo, hi,
                200);
            return gp_open(x - u) / g0 + hh(x) * gp_closed(u - x) / (g0 * hh(u)) +
                   hh(x) * inner / (g0 * g0);
        };
    }

    fredholm::FredholmProblem p;
    p.kernel = A;
    p.a = t1;
    p.b = tm;
    auto kp = spec.gradient_derivative;
    p.rhs = [hh, kp, g0](double x) { return -hh(x) * kp(x) / (g0 * g0); };
    std::vector<double> brk;
    for (double t : fit.F.jump_points())
        if (t > t1 && t < tm) brk.push_back(t);
    for (double t : fit.F.jump_points())
        if (t + 1.0 > t1 && t + 1.0 < tm) brk.push_back(t + 1.0);
    p.breakpoints = brk;
    p.singular_left = true;
    p.singular_right = true;
    return fredholm::solve_second_kind(p, grid_size);
}

// theta for the mixture fit: the solved phi lives on [tau1, taum] and is set
// to zero outside, contributing boundary atoms at tau1 and taum. Below tau1
// theta is extended by the differentiated Volterra relation
//   theta(x) = -(kappa'(x) + int_x theta(z) g'(z-x) dz) / g0,
// marching downward from tau1. No extension above 1+taum is attempted: the
// defining relation only reaches that region when taum < 1, and the
// downstream identities are evaluated on fits with taum > 1.
inline std::function<double(double)> theta_mixture_extended(const MixtureFit& fit,
                                                            const ConvolutionKernel& g,
                                                            const FunctionalSpec& spec,
                                                            const GridFunction& phi) {
    double t1 = fit.tau1, tm = fit.taum;
    auto hh = [h = fit.hhat](double z) { return std::max(h(z), kDensityFloor); };

    auto pm = std::make_shared<detail::PhiMeasure>(detail::PhiMeasure::from_grid(phi, t1));
    double phi_end = phi.values().back();
    auto core = [pm, g, hh, t1, tm, phi_end](double z) {
        // interior piecewise-linear part plus the closing atom at taum
        double s = pm->convolve(g, z);
        if (z >= tm) s -= phi_end * g.g(z - tm);
        return s / hh(z);
    };

    // lower extension on (0, t1) by downward marching
    int ext_n = 400;
    auto ext_x = std::make_shared<std::vector<double>>();
    auto ext_v = std::make_shared<std::vector<double>>();
    if (t1 > 1e-9) {
        double h = t1 / ext_n;
        auto gp = [g](double w) { return w > 0.0 && w < g.support ? g.gprime(w) : 0.0; };
        std::function<double(double)> theta_all = [&](double z) -> double {
            if (z >= t1) return core(z);
            // linear interp in the already-built extension table
            if (ext_x->empty() || z < ext_x->front()) return ext_v->empty() ? 0.0 : ext_v->front();
            auto it = std::upper_bound(ext_x->begin(), ext_x->end(), z);
            std::size_t i = it - ext_x->begin();
            if (i == ext_x->size()) return ext_v->back();
            double lo = (*ext_x)[i - 1], hi = (*ext_x)[i];
            double t = (z - lo) / (hi - lo);
            return (1.0 - t) * (*ext_v)[i - 1] + t * (*ext_v)[i];
        };
        for (int j = ext_n; j-- > 0;) {
            double x = j * h;
            double hi = std::isfinite(g.support) ? x + g.support : x + 12.0;
            double inner = midpoint_integrate(
                [&](double zz) { return theta_all(zz) * gp(zz - x); }, x, hi, 600);
            double v = -(spec.gradient_derivative(x) + inner) / g.g0;
            ext_x->insert(ext_x->begin(), x);
            ext_v->insert(ext_v->begin(), v);
        }
    }
    return [ext_x, ext_v, core, t1](double z) -> double {
        if (z >= t1) return core(z);
        if (ext_x->empty()) return 0.0;
        if (z <= ext_x->front()) return ext_v->front();
        auto it = std::upper_bound(ext_x->begin(), ext_x->end(), z);
        std::size_t i = it - ext_x->begin();
        if (i == ext_x->size()) return ext_v->back();
        double lo = (*ext_x)[i - 1], hi = (*ext_x)[i];
        double t = (z - lo) / (hi - lo);
        return (1.0 - t) * (*ext_v)[i - 1] + t * (*ext_v)[i];
    };
}

// Closed forms for the exponential kernel: K_t(F), the two-level score, the
// two-branch phi with its jump at t, and the limit variance.
struct ExponentialForms {
    double K = 0.0;
    double theta_low = 0.0;   // value on [0, t)
    double theta_high = 0.0;  // value on [t, infinity)
    functionals::PhiFunction phi;
    double H0_t = 0.0;
    double sigma_sq = 0.0;
};

namespace detail {

inline ExponentialForms exp_forms_common(double t, double K,
                                         const std::function<double(double)>& F, double lo,
                                         double hi) {
    ExponentialForms out;
    out.K = K;
    out.theta_low = -1.0 - K;
    out.theta_high = -K;
    out.H0_t = -K;  // H0(t) = -K_t(F0)
    out.sigma_sq = (1.0 + K) * (1.0 + K) * out.H0_t + K * K * (1.0 - out.H0_t);

    auto right = [F, K, t](double x) {
        if (x < t) return -(1.0 + K) * F(x);
        return -K * (F(x) - 1.0);
    };
    auto left = [F, K, t](double x) {
        double Fm = F(std::nexttoward(x, -1.0));
        if (x <= t) return -(1.0 + K) * Fm;
        return -K * (Fm - 1.0);
    };
    out.phi.eval_right = right;
    out.phi.eval_left = left;
    out.phi.discrete_jumps.push_back({t, right(t) - left(t)});
    std::vector<double> xs(513), vs(513);
    for (int i = 0; i <= 512; ++i) {
        xs[i] = lo + (hi - lo) * i / 512.0;
        vs[i] = right(xs[i]);
    }
    out.phi.smooth_part = GridFunction(xs, vs);
    return out;
}

}  // namespace detail

inline ExponentialForms exponential_closed_forms(double t, const StepDistribution& F) {
    if (F.num_jumps() == 0) throw std::invalid_argument("exponential_closed_forms: empty F");
    if (!(t > F.jump_points().front() && t < F.support_end()))
        throw std::invalid_argument("exponential_closed_forms: t outside support");
    double K = 0.0;
    for (std::size_t i = 0; i < F.num_jumps(); ++i) {
        double x = F.jump_points()[i];
        if (x < t) K += (std::exp(-(t - x)) - 1.0) * F.masses()[i];
    }
    return detail::exp_forms_common(t, K, [&F](double x) { return F.cdf(x); }, 0.0,
                                    F.support_end());
}

inline ExponentialForms exponential_closed_forms(double t, const Cdf& F0) {
    if (!(t > F0.a && t < F0.b))
        throw std::invalid_argument("exponential_closed_forms: t outside support");
    if (!F0.density) throw std::invalid_argument("exponential_closed_forms: density required");
    double K = midpoint_integrate(
        [&](double x) { return (std::exp(-(t - x)) - 1.0) * F0.density(x); }, F0.a, t, 4000);
    return detail::exp_forms_common(t, K, F0.eval, F0.a, F0.b);
}

// Local version of the phi equation: same kernel A, right-hand side
// h0(x) g'(t-x) 1_{[0,t)}(x) / g0^2, which jumps at t and produces a
// solution with a jump at the same location.
inline fredholm::FredholmProblem phi_local_problem(double t, const Cdf& F0,
                                                   const ConvolutionKernel& g) {
    if (!(t > F0.a && t < F0.b))
        throw std::invalid_argument("solve_phi_local: t not strictly interior");
    auto K = detail::make_kernel(F0, g);
    double g0sq = K.g0 * K.g0;
    auto h0 = K.h0;
    auto gp = [g](double w) { return w > 0.0 && w < g.support ? g.gprime(w) : 0.0; };
    double gp0 = g.gprime(1e-12);

    fredholm::FredholmProblem p;
    p.kernel = K.A;
    p.a = F0.a;
    p.b = F0.b;
    p.rhs = [h0, gp, t, g0sq](double x) {
        return x < t ? h0(x) * gp(t - x) / g0sq : 0.0;
    };
    p.rhs_jump = fredholm::FredholmProblem::RhsJump{t, h0(t) * gp0 / g0sq, 0.0};
    p.singular_left = true;
    p.singular_right = true;
    if (std::isfinite(g.support) && t - g.support > F0.a)
        p.breakpoints.push_back(t - g.support);
    return p;
}

inline fredholm::FredholmSolution solve_phi_local(double t, const Cdf& F0,
                                                  const ConvolutionKernel& g, int grid_size) {
    return fredholm::solve_with_jump(phi_local_problem(t, F0, g), grid_size);
}

enum class LocalCaseDeconv { SmoothDecreasing, DiscontinuitySet };

// Standardizing factor c such that n^{1/3} c (F_n(t0) - F0(t0)) converges to
// 2Z. SmoothDecreasing uses {2 g(0)^2 / (f0 h0)}^{1/3}; DiscontinuitySet uses
// f0^{-1/3} {2 sum (g(a_i)-g(a_i-))^2 / h0(t0+a_i)}^{1/3}, which reduces to
// the reciprocals of {F0(1-F0)f0/2}^{1/3} (uniform g) and {f0 h0 / 2}^{1/3}
// (exponential g).
inline double local_scaling_constant_deconv(double t0, const Cdf& F0,
                                            const ConvolutionKernel& g, LocalCaseDeconv kind) {
    if (!F0.density) throw std::invalid_argument("local_scaling_constant_deconv: density required");
    double f0 = F0.density(t0);
    if (!(f0 > 0.0)) throw std::invalid_argument("local_scaling_constant_deconv: zero density");
    auto h0 = h0_density(F0, g);
    if (kind == LocalCaseDeconv::SmoothDecreasing) {
        double h = h0(t0);
        if (!(h > 0.0)) throw std::invalid_argument("local_scaling_constant_deconv: zero h0");
        return std::cbrt(2.0 * g.g0 * g.g0 / (f0 * h));
    }
    double s = 0.0;
    for (auto [a, jump] : g.discontinuities) {
        double h = h0(t0 + a);
        if (h > kDensityFloor) s += jump * jump / h;
    }
    if (!(s > 0.0)) throw std::invalid_argument("local_scaling_constant_deconv: no jump contribution");
    return std::cbrt(2.0 * s / f0);
}

}  // namespace iceq::deconv
