#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "iceq/core.hpp"
#include "iceq/fredholm.hpp"
#include "iceq/icens.hpp"
#include "iceq/quadrature.hpp"

namespace iceq::functionals {

// Solution of the efficiency equation: a tabulated smooth part plus the
// discrete jumps it inherits from the step distribution it was solved at.
struct PhiFunction {
    GridFunction smooth_part;
    struct JumpRec {
        double location;
        double jump;  // right limit minus left limit
    };
    std::vector<JumpRec> discrete_jumps;
    std::function<double(double)> eval_right;
    std::function<double(double)> eval_left;
    double residual_sup = 0.0;
    int grid_size = 0;
    double condition_estimate = 0.0;

    double eval(double x) const {
        return eval_right ? eval_right(x) : smooth_part.eval(x);
    }
    double eval_at_left(double x) const {
        return eval_left ? eval_left(x) : smooth_part.eval(x);
    }
};

struct ThetaFunction {
    std::function<double(double, double, int, int)> eval;
};

namespace detail {

// Everything needed to evaluate the discretized operator of the efficiency
// equation: B is the nonnegative integration factor, S its row integral
// under the solver's own quadrature (so the discrete maximum principle is
// exact), d the multiplier, k the right-hand derivative of the gradient.
struct Assembly {
    QuadratureGrid quad;
    std::function<double(double, bool)> F;  // (x, left_limit)
    icens::ObservationModel model;
    std::function<double(double, bool)> k;  // rhs derivative, side-aware
    double M = 1.0;

    double B(double x, double u, bool left_at_x) const {
        double g = (u < x) ? model.g(u, x) : model.g(x, u);
        if (g <= 0.0) return 0.0;
        double fx = F(x, left_at_x), fu = F(u, false);
        double den = (u < x) ? fx - fu : fu - fx;
        if (den < 1e-12) return 0.0;  // shared constancy interval
        return g / den;
    }

    double d(double x, bool left_at_x) const {
        double fx = F(x, left_at_x);
        double den = model.g1(x) * (1.0 - fx) + model.g2(x) * fx;
        if (den <= 0.0) return 0.0;
        return fx * (1.0 - fx) / den;
    }

    mutable std::map<std::pair<double, bool>, double> s_cache;
    double S(double x, bool left_at_x) const {
        auto key = std::make_pair(x, left_at_x);
        auto it = s_cache.find(key);
        if (it != s_cache.end()) return it->second;
        double s = 0.0;
        for (std::size_t j = 0; j < quad.nodes.size(); ++j)
            s += quad.weights[j] * B(x, quad.nodes[j], left_at_x);
        s_cache.emplace(key, s);
        return s;
    }

    double c(double x, bool left_at_x) const { return 1.0 + d(x, left_at_x) * S(x, left_at_x); }
};

inline std::function<double(double)> nystrom_eval(std::shared_ptr<Assembly> as,
                                                  std::shared_ptr<std::vector<double>> phi,
                                                  bool left) {
    return [as, phi, left](double x) {
        double acc = 0.0;
        for (std::size_t j = 0; j < as->quad.nodes.size(); ++j)
            acc += as->quad.weights[j] * as->B(x, as->quad.nodes[j], left) * (*phi)[j];
        double dd = as->d(x, left);
        return dd * (as->k(x, left) + acc) / as->c(x, left);
    };
}

inline PhiFunction solve_phi_impl(const icens::ObservationModel& model,
                                  std::function<double(double, bool)> F,
                                  std::function<double(double, bool)> k,
                                  const std::vector<double>& jump_locs, int grid_size,
                                  std::optional<double> local_t) {
    double M = model.M;
    auto as = std::make_shared<Assembly>();
    as->F = std::move(F);
    as->model = model;
    as->k = std::move(k);
    as->M = M;

    std::vector<double> brk = jump_locs;
    if (local_t) brk.push_back(*local_t);
    as->quad = build_open_grid(0.0, M, grid_size, false, false, brk);

    fredholm::FredholmProblem p;
    p.a = 0.0;
    p.b = M;
    p.breakpoints = brk;
    p.kernel = [as](double x, double u) {
        return -as->d(x, false) * as->B(x, u, false) / as->c(x, false);
    };
    p.rhs = [as](double x) { return as->d(x, false) * as->k(x, false) / as->c(x, false); };

    fredholm::FredholmSolution sol;
    if (local_t) {
        double t = *local_t;
        p.rhs_jump = fredholm::FredholmProblem::RhsJump{
            t, as->d(t, true) * as->k(t, true) / as->c(t, true),
            as->d(t, false) * as->k(t, false) / as->c(t, false)};
        sol = fredholm::solve_with_jump(p, grid_size);
    } else {
        sol = fredholm::solve_second_kind(p, grid_size);
    }

    auto phi_nodes = std::make_shared<std::vector<double>>();
    const auto& grid = sol.solution.grid();
    const auto& vals = sol.solution.values();
    // keep only the quadrature-node values (solve_with_jump inserts t)
    phi_nodes->reserve(as->quad.nodes.size());
    std::size_t qi = 0;
    for (std::size_t i = 0; i < grid.size() && qi < as->quad.nodes.size(); ++i) {
        if (std::abs(grid[i] - as->quad.nodes[qi]) < 1e-14) {
            phi_nodes->push_back(vals[i]);
            ++qi;
        }
    }

    PhiFunction out;
    out.smooth_part = sol.solution;
    out.eval_right = nystrom_eval(as, phi_nodes, false);
    out.eval_left = nystrom_eval(as, phi_nodes, true);
    out.residual_sup = sol.residual_sup;
    out.grid_size = sol.grid_size;
    out.condition_estimate = sol.condition_estimate;
    std::vector<double> jl = jump_locs;
    if (local_t) jl.push_back(*local_t);
    std::sort(jl.begin(), jl.end());
    for (double tau : jl) {
        double j = out.eval_right(tau) - out.eval_left(tau);
        out.discrete_jumps.push_back({tau, j});
    }
    return out;
}

}  // namespace detail

// Efficiency equation at a smooth F0 with positive density; requires a
// separated model so the integration factors stay bounded.
inline PhiFunction solve_phi_smooth(const icens::ObservationModel& model, const Cdf& F0,
                                    const FunctionalSpec& spec, int grid_size) {
    if (!(model.epsilon > 0.0))
        throw std::invalid_argument("solve_phi_smooth: separated model required");
    spec.validate(0.0, model.M);
    auto k = spec.gradient_derivative;
    return detail::solve_phi_impl(
        model, [F = F0.eval](double x, bool) { return F(x); },
        [k](double x, bool) { return k(x); }, {}, grid_size, std::nullopt);
}

// Same equation at a step distribution; the solution jumps where Fhat jumps
// (plus at local_t when given, where the rhs becomes the indicator of [0,t)).
inline PhiFunction solve_phi_at_step(const icens::ObservationModel& model,
                                     const StepDistribution& Fhat, const FunctionalSpec& spec,
                                     int grid_size,
                                     std::optional<double> local_t = std::nullopt) {
    spec.validate(0.0, model.M);
    auto F = [Fhat](double x, bool left) {
        double v = Fhat.cdf(x);
        if (left) {
            const auto& xs = Fhat.jump_points();
            auto it = std::lower_bound(xs.begin(), xs.end(), x);
            if (it != xs.end() && std::abs(*it - x) < 1e-14)
                v -= Fhat.masses()[it - xs.begin()];
        }
        return v;
    };
    std::function<double(double, bool)> k;
    if (local_t) {
        double t = *local_t;
        if (!(t > 0.0 && t < model.M))
            throw std::invalid_argument("solve_phi_at_step: local_t outside (0,M)");
        k = [t](double x, bool left) { return (x < t || (left && x <= t)) ? 1.0 : 0.0; };
    } else {
        auto kd = spec.gradient_derivative;
        k = [kd](double x, bool) { return kd(x); };
    }
    std::vector<double> jl;
    for (double x : Fhat.jump_points())
        if (x > 0.0 && x < model.M) jl.push_back(x);
    return detail::solve_phi_impl(model, F, k, jl, grid_size, local_t);
}

// Piecewise-constant projection onto the constancy intervals of Fhat: on each
// interval take phi at the crossing point of F0 with the level of Fhat if one
// exists, otherwise the appropriate one-sided endpoint value.
inline PhiFunction project_bar_phi(const PhiFunction& phi, const StepDistribution& Fhat,
                                   const Cdf& F0) {
    double M = Fhat.support_end();
    std::vector<double> taus{0.0};
    for (double x : Fhat.jump_points())
        if (x > 0.0 && x < M) taus.push_back(x);
    taus.push_back(M);

    auto levels = std::make_shared<std::vector<double>>();
    auto cuts = std::make_shared<std::vector<double>>(taus);
    for (std::size_t i = 0; i + 1 < taus.size(); ++i) {
        double lo = taus[i], hi = taus[i + 1];
        double y = Fhat.cdf(lo);
        double f_lo = F0.eval(lo), f_hi = F0.eval(hi);
        double v;
        if (y >= f_lo && y <= f_hi) {
            double s = F0.inverse ? F0.inverse(y) : lo;
            s = std::clamp(s, lo, hi);
            v = phi.eval(s);
        } else if (y > f_hi) {
            // F0 below the level throughout the interval
            v = phi.eval_at_left(hi);
        } else {
            v = phi.eval(lo);
        }
        levels->push_back(v);
    }

    auto level_at = [cuts, levels](double x) {
        auto it = std::upper_bound(cuts->begin(), cuts->end(), x);
        std::size_t i = (it == cuts->begin()) ? 0 : (it - cuts->begin() - 1);
        if (i >= levels->size()) i = levels->size() - 1;
        return (*levels)[i];
    };
    PhiFunction out;
    out.eval_right = level_at;
    out.eval_left = [cuts, levels, level_at](double x) {
        auto it = std::lower_bound(cuts->begin(), cuts->end(), x);
        if (it != cuts->end() && std::abs(*it - x) < 1e-14 && it != cuts->begin())
            return (*levels)[std::min<std::size_t>(it - cuts->begin() - 1, levels->size() - 1)];
        return level_at(x);
    };
    for (std::size_t i = 1; i + 1 < cuts->size(); ++i)
        out.discrete_jumps.push_back({(*cuts)[i], (*levels)[i] - (*levels)[i - 1]});
    // dense tabulation for export
    int m = 512;
    std::vector<double> xs(m + 1), vs(m + 1);
    for (int i = 0; i <= m; ++i) {
        xs[i] = M * i / m;
        vs[i] = level_at(xs[i]);
    }
    out.smooth_part = GridFunction(std::move(xs), std::move(vs));
    out.residual_sup = phi.residual_sup;
    out.grid_size = phi.grid_size;
    out.condition_estimate = phi.condition_estimate;
    return out;
}

inline ThetaFunction theta_from_phi(const PhiFunction& phi, const Cdf& F) {
    auto Fe = F.eval;
    auto pe = [phi](double x) { return phi.eval(x); };
    return {[Fe, pe](double t, double u, int d1, int d2) {
        double Ft = Fe(t), Fu = Fe(u);
        if (d1) {
            if (Ft < 1e-12) throw std::runtime_error("theta_from_phi: denominator underflow");
            return -pe(t) / Ft;
        }
        if (d2) {
            double den = Fu - Ft;
            if (den < 1e-12) throw std::runtime_error("theta_from_phi: denominator underflow");
            return -(pe(u) - pe(t)) / den;
        }
        double den = 1.0 - Fu;
        if (den < 1e-12) throw std::runtime_error("theta_from_phi: denominator underflow");
        return pe(u) / den;
    }};
}

// Limit variance of the efficient estimator: three integrals against the
// observation density, the double integral restricted to the separation
// region u - t > epsilon.
inline double asymptotic_variance(const PhiFunction& phi, const icens::ObservationModel& model,
                                  const Cdf& F0) {
    double M = model.M;
    auto pv = [&](double x) { return phi.smooth_part.eval(x); };

    auto q1 = build_open_grid(0.0, M, 1200, true, false);
    double t1 = q1.integrate([&](double t) {
        double F = F0.eval(t);
        if (F < 1e-14) return 0.0;
        double p = pv(t);
        return p * p / F * model.g1(t);
    });
    auto q3 = build_open_grid(0.0, M, 1200, false, true);
    double t3 = q3.integrate([&](double u) {
        double F = F0.eval(u);
        if (1.0 - F < 1e-14) return 0.0;
        double p = pv(u);
        return p * p / (1.0 - F) * model.g2(u);
    });

    double eps = model.epsilon;
    int nt = 600, ns = 600;
    double t2 = 0.0;
    for (int i = 0; i < nt; ++i) {
        double t = (M - eps) * (i + 0.5) / nt;
        double len = M - t - eps;
        double pt = pv(t), Ft = F0.eval(t);
        double row = 0.0;
        for (int j = 0; j < ns; ++j) {
            double u = t + eps + len * (j + 0.5) / ns;
            double g = model.g(t, u);
            if (g <= 0.0) continue;
            double den = F0.eval(u) - Ft;
            if (den < 1e-14) continue;
            double dphi = pv(u) - pt;
            row += dphi * dphi / den * g;
        }
        t2 += row * (len / ns) * ((M - eps) / nt);
    }
    double v = t1 + t2 + t3;
    if (!std::isfinite(v)) throw std::runtime_error("asymptotic_variance: non-finite result");
    return v;
}

inline double plugin_functional(const StepDistribution& Fhat, const FunctionalSpec& spec) {
    return integrate_against(Fhat, spec.gradient);
}

namespace detail {

// integral of g-over-increment away from x, with a log substitution toward
// the separation boundary so the near-singular factor is resolved
template <class G>
double log_refined_integral(G&& integrand, double gap_lo, double gap_hi, int panels = 2000) {
    // integrates f(e^w)e^w dw over [log gap_lo, log gap_hi]
    if (!(gap_hi > gap_lo)) return 0.0;
    double wl = std::log(gap_lo), wh = std::log(gap_hi);
    double h = (wh - wl) / panels;
    double s = 0.0;
    for (int i = 0; i < panels; ++i) {
        double w = wl + (i + 0.5) * h;
        double r = std::exp(w);
        s += integrand(r) * r;
    }
    return s * h;
}

}  // namespace detail

inline double xi_k1(double t0, const icens::ObservationModel& model, const Cdf& F0) {
    double M = model.M, eps = std::max(model.epsilon, 1e-8);
    if (t0 + eps >= M) return 0.0;
    double F_t0 = F0.eval(t0);
    return detail::log_refined_integral(
        [&](double r) {
            double v = t0 + r;
            double g = model.g(t0, v);
            if (g <= 0.0) return 0.0;
            double den = F0.eval(v) - F_t0;
            return den > 0.0 ? g / den : 0.0;
        },
        eps, M - t0);
}

inline double xi_k2(double t0, const icens::ObservationModel& model, const Cdf& F0) {
    double eps = std::max(model.epsilon, 1e-8);
    if (t0 - eps <= 0.0) return 0.0;
    double F_t0 = F0.eval(t0);
    return detail::log_refined_integral(
        [&](double r) {
            double u = t0 - r;
            double g = model.g(u, t0);
            if (g <= 0.0) return 0.0;
            double den = F_t0 - F0.eval(u);
            return den > 0.0 ? g / den : 0.0;
        },
        eps, t0);
}

inline double xi_scaling_constant(double t0, const icens::ObservationModel& model,
                                  const Cdf& F0) {
    if (!(t0 > 0.0 && t0 < model.M))
        throw std::invalid_argument("xi_scaling_constant: t0 outside (0,M)");
    double F = F0.eval(t0);
    if (!(F > 0.0 && F < 1.0))
        throw std::invalid_argument("xi_scaling_constant: F0(t0) not interior");
    double k1, k2;
    if (model.family == "uniform-triangle" && F0.label == "uniform") {
        double eps = model.epsilon, c = (1.0 - eps) * (1.0 - eps);
        k1 = (t0 <= 1.0 - eps) ? 2.0 * std::log((1.0 - t0) / eps) / c : 0.0;
        k2 = (t0 >= eps) ? 2.0 * std::log(t0 / eps) / c : 0.0;
    } else {
        k1 = xi_k1(t0, model, F0);
        k2 = xi_k2(t0, model, F0);
    }
    return model.g1(t0) / F + k1 + k2 + model.g2(t0) / (1.0 - F);
}

enum class LocalCase { Separated, Nonseparated };

struct LocalScale {
    double scale;
    std::string rate_label;
};

inline LocalScale local_limit_scale(double t0, const icens::ObservationModel& model,
                                    const Cdf& F0, LocalCase which) {
    double f0 = F0.density(t0);
    if (!(f0 > 0.0)) throw std::invalid_argument("local_limit_scale: zero density");
    if (which == LocalCase::Separated) {
        double xi = xi_scaling_constant(t0, model, F0);
        return {std::pow(2.0 * xi / f0, -1.0 / 3.0), "n^{-1/3}"};
    }
    double h = model.g(t0, t0);
    if (!(h > 0.0))
        throw std::invalid_argument("local_limit_scale: diagonal density not positive");
    return {std::pow(0.75 * f0 * f0 / h, 1.0 / 3.0), "(n log n)^{-1/3}"};
}

}  // namespace iceq::functionals
