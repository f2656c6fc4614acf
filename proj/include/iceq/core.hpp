#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iceq {

inline constexpr double kMassTol = 1e-12;

// Sub-distribution function with finitely many jumps on [0, support_end].
// Jump points are kept strictly increasing; coincident input points are
// merged by summing their masses.
class StepDistribution {
public:
    StepDistribution() = default;

    StepDistribution(std::vector<double> points, std::vector<double> masses,
                     double support_end)
        : support_end_(support_end) {
        if (points.size() != masses.size())
            throw std::invalid_argument("StepDistribution: points/masses size mismatch");
        std::vector<std::size_t> idx(points.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t a, std::size_t b) { return points[a] < points[b]; });
        for (std::size_t i : idx) {
            if (!std::isfinite(points[i]) || !std::isfinite(masses[i]))
                throw std::invalid_argument("StepDistribution: non-finite input");
            if (masses[i] <= 0.0) continue;
            if (!x_.empty() && points[i] - x_.back() < kMassTol) {
                p_.back() += masses[i];
            } else {
                x_.push_back(points[i]);
                p_.push_back(masses[i]);
            }
        }
        double tot = 0.0;
        for (double m : p_) tot += m;
        if (tot > 1.0 + 1e-12)
            throw std::invalid_argument("StepDistribution: total mass exceeds 1");
    }

    // Right-continuous cdf evaluation.
    double cdf(double x) const {
        double s = 0.0;
        for (std::size_t i = 0; i < x_.size() && x_[i] <= x; ++i) s += p_[i];
        return s;
    }

    double total_mass() const {
        double s = 0.0;
        for (double m : p_) s += m;
        return s;
    }

    std::size_t num_jumps() const { return x_.size(); }
    const std::vector<double>& jump_points() const { return x_; }
    const std::vector<double>& masses() const { return p_; }
    double support_end() const { return support_end_; }

private:
    std::vector<double> x_;
    std::vector<double> p_;
    double support_end_ = 1.0;
};

// Sum of c(tau_i) * mass_i, the plug-in integral of c against dF.
inline double integrate_against(const StepDistribution& F,
                                const std::function<double(double)>& c) {
    double s = 0.0;
    for (std::size_t i = 0; i < F.num_jumps(); ++i) {
        double v = c(F.jump_points()[i]);
        if (!std::isfinite(v))
            throw std::runtime_error("integrate_against: non-finite integrand at x=" +
                                     std::to_string(F.jump_points()[i]));
        s += v * F.masses()[i];
    }
    return s;
}

// Real-valued function tabulated on a strictly increasing grid, with an
// optional jump node carrying distinct left/right values.
class GridFunction {
public:
    struct Jump {
        double location;
        double left;
        double right;
    };

    GridFunction() = default;
    GridFunction(std::vector<double> xs, std::vector<double> vs,
                 std::optional<Jump> jump = std::nullopt)
        : x_(std::move(xs)), v_(std::move(vs)), jump_(jump) {
        if (x_.size() != v_.size() || x_.size() < 2)
            throw std::invalid_argument("GridFunction: bad grid");
        for (std::size_t i = 1; i < x_.size(); ++i)
            if (!(x_[i] > x_[i - 1]))
                throw std::invalid_argument("GridFunction: grid not strictly increasing");
        for (double v : v_)
            if (!std::isfinite(v))
                throw std::invalid_argument("GridFunction: non-finite value");
        if (jump_) {
            auto it = std::lower_bound(x_.begin(), x_.end(), jump_->location);
            if (it == x_.end() || std::abs(*it - jump_->location) > 1e-14)
                throw std::invalid_argument("GridFunction: jump location not a grid node");
        }
    }

    const std::vector<double>& grid() const { return x_; }
    const std::vector<double>& values() const { return v_; }
    const std::optional<Jump>& jump() const { return jump_; }

    double front() const { return x_.front(); }
    double back() const { return x_.back(); }

    // Piecewise-linear interpolation; constant extension outside the grid.
    // At the jump node the left branch is used for x < location.
    double eval(double x) const {
        if (jump_) {
            if (x < jump_->location) {
                return eval_side(x, jump_->location, jump_->left);
            }
            return eval_side(x, jump_->location, jump_->right);
        }
        return eval_plain(x);
    }

private:
    double eval_plain(double x) const {
        if (x <= x_.front()) return v_.front();
        if (x >= x_.back()) return v_.back();
        auto it = std::upper_bound(x_.begin(), x_.end(), x);
        std::size_t i = static_cast<std::size_t>(it - x_.begin());
        double t = (x - x_[i - 1]) / (x_[i] - x_[i - 1]);
        return (1.0 - t) * v_[i - 1] + t * v_[i];
    }

    double eval_side(double x, double loc, double loc_value) const {
        // interpolate treating the jump node as carrying loc_value
        if (x <= x_.front()) return x_.front() == loc ? loc_value : v_.front();
        if (x >= x_.back()) return x_.back() == loc ? loc_value : v_.back();
        auto it = std::upper_bound(x_.begin(), x_.end(), x);
        std::size_t i = static_cast<std::size_t>(it - x_.begin());
        double lo = (x_[i - 1] == loc) ? loc_value : v_[i - 1];
        double hi = (x_[i] == loc) ? loc_value : v_[i];
        double t = (x - x_[i - 1]) / (x_[i] - x_[i - 1]);
        return (1.0 - t) * lo + t * hi;
    }

    std::vector<double> x_;
    std::vector<double> v_;
    std::optional<Jump> jump_;
};

// Smooth functional K given through its canonical gradient (up to an
// additive constant) and the gradient's derivative.
struct FunctionalSpec {
    std::function<double(double)> gradient;
    std::function<double(double)> gradient_derivative;
    std::string label;

    // Finite-difference consistency check at random points in [a,b].
    void validate(double a, double b, std::uint64_t seed = 17) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> unif(a + 0.05 * (b - a), b - 0.05 * (b - a));
        for (int i = 0; i < 10; ++i) {
            double x = unif(rng);
            double h = 1e-6 * (b - a);
            double fd = (gradient(x + h) - gradient(x - h)) / (2.0 * h);
            double d = gradient_derivative(x);
            double scale = std::max({1.0, std::abs(fd), std::abs(d)});
            if (std::abs(fd - d) / scale > 1e-5)
                throw std::invalid_argument(
                    "FunctionalSpec: gradient_derivative inconsistent with gradient");
        }
    }
};

inline FunctionalSpec first_moment_functional() {
    return {[](double x) { return x; }, [](double) { return 1.0; }, "mean"};
}

inline FunctionalSpec second_moment_functional() {
    return {[](double x) { return x * x; }, [](double x) { return 2.0 * x; }, "second-moment"};
}

// Distribution function given by a callable, with optional analytic helpers.
struct Cdf {
    std::function<double(double)> eval;
    std::function<double(double)> density;
    std::function<double(double)> inverse;        // quantile function
    std::function<double(double)> density_deriv;  // f0'
    double a = 0.0;
    double b = 1.0;
    std::string label;
};

inline Cdf uniform_cdf(double a = 0.0, double b = 1.0) {
    double len = b - a;
    return {[=](double x) { return std::clamp((x - a) / len, 0.0, 1.0); },
            [=](double x) { return (x >= a && x <= b) ? 1.0 / len : 0.0; },
            [=](double u) { return a + u * len; },
            [](double) { return 0.0; },
            a, b, "uniform"};
}

// F0(x) = 1 - (1-x)^2 on [0,1]
inline Cdf concave_quadratic_cdf() {
    return {[](double x) {
                if (x <= 0.0) return 0.0;
                if (x >= 1.0) return 1.0;
                return 1.0 - (1.0 - x) * (1.0 - x);
            },
            [](double x) { return (x >= 0.0 && x <= 1.0) ? 2.0 * (1.0 - x) : 0.0; },
            [](double u) { return 1.0 - std::sqrt(1.0 - u); },
            [](double) { return -2.0; },
            0.0, 1.0, "concave-quadratic"};
}

inline Cdf cdf_from_step(const StepDistribution& F) {
    return {[F](double x) { return F.cdf(x); },
            nullptr, nullptr, nullptr, 0.0, F.support_end(), "step"};
}

enum class DistanceKind { Sup, L2 };

// Sup distance is exact at jump points and grid nodes; L2 uses composite
// midpoint quadrature so step functions are never evaluated at their jumps.
inline double distance(const std::function<double(double)>& F,
                       const std::function<double(double)>& G, double a, double b,
                       DistanceKind kind, const std::vector<double>& probe_points = {},
                       int panels = 2000) {
    if (!(a < b)) throw std::invalid_argument("distance: empty domain");
    if (kind == DistanceKind::Sup) {
        double d = 0.0;
        auto probe = [&](double x) {
            d = std::max(d, std::abs(F(x) - G(x)));
        };
        for (int i = 0; i <= panels; ++i) probe(a + (b - a) * i / panels);
        for (double x : probe_points)
            if (x >= a && x <= b) {
                probe(x);
                // just left of a jump
                double xm = std::nexttoward(x, a);
                if (xm >= a) probe(xm);
            }
        return d;
    }
    double h = (b - a) / panels;
    double s = 0.0;
    for (int i = 0; i < panels; ++i) {
        double x = a + (i + 0.5) * h;
        double d = F(x) - G(x);
        s += d * d * h;
    }
    return std::sqrt(s);
}

}  // namespace iceq
