#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>

#include "iceq/core.hpp"
#include "iceq/quadrature.hpp"

namespace iceq::fredholm {

// Linear Fredholm equation of the second kind
//   phi(x) + int_a^b A(x,u) phi(u) du = r(x)
struct FredholmProblem {
    std::function<double(double, double)> kernel;
    std::function<double(double)> rhs;
    double a = 0.0;
    double b = 1.0;
    struct RhsJump {
        double location;
        double left;
        double right;
    };
    std::optional<RhsJump> rhs_jump;
    bool singular_left = false;
    bool singular_right = false;
    std::vector<double> breakpoints;  // extra panel boundaries for the grid
};

struct FredholmSolution {
    GridFunction solution;
    double residual_sup = 0.0;
    int grid_size = 0;
    double condition_estimate = 0.0;
    QuadratureGrid quadrature;
};

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// Hager-style 1-norm estimate of ||M^{-1}||_1 from an LU factorization.
inline double inverse_norm1_estimate(const Eigen::PartialPivLU<Eigen::MatrixXd>& lu, int n) {
    Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.0 / n);
    double est = 0.0;
    for (int iter = 0; iter < 5; ++iter) {
        Eigen::VectorXd y = lu.solve(x);
        double e = y.lpNorm<1>();
        if (e <= est && iter > 0) break;
        est = e;
        Eigen::VectorXd xi(n);
        for (int i = 0; i < n; ++i) xi[i] = (y[i] >= 0.0) ? 1.0 : -1.0;
        Eigen::VectorXd z = lu.transpose().solve(xi);
        int j = 0;
        z.cwiseAbs().maxCoeff(&j);
        if (std::abs(z[j]) <= z.dot(x)) break;
        x.setZero();
        x[j] = 1.0;
    }
    return est;
}

struct Discretization {
    QuadratureGrid q;
    std::vector<double> extra_nodes;  // zero-weight collocation points
    std::vector<double> extra_rhs;
};

inline FredholmSolution solve_discretized(const FredholmProblem& p, const Discretization& d,
                                          int grid_size, bool want_jump) {
    const auto& q = d.q;
    int nq = static_cast<int>(q.nodes.size());
    int ne = static_cast<int>(d.extra_nodes.size());
    int n = nq + ne;
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd r(n);
    auto collocation_x = [&](int i) {
        return i < nq ? q.nodes[i] : d.extra_nodes[i - nq];
    };
    for (int i = 0; i < n; ++i) {
        double x = collocation_x(i);
        for (int j = 0; j < nq; ++j) {
            double a = p.kernel(x, q.nodes[j]);
            if (!std::isfinite(a))
                throw SolverError("kernel non-finite at (x,u)=(" + std::to_string(x) + "," +
                                  std::to_string(q.nodes[j]) + ")");
            M(i, j) = q.weights[j] * a;
        }
        M(i, i) += 1.0;
        r[i] = (i < nq) ? p.rhs(x) : d.extra_rhs[i - nq];
        if (!std::isfinite(r[i]))
            throw SolverError("rhs non-finite at x=" + std::to_string(x));
    }

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);
    double norm1 = 0.0;
    for (int j = 0; j < n; ++j) norm1 = std::max(norm1, M.col(j).cwiseAbs().sum());
    double cond = norm1 * inverse_norm1_estimate(lu, n);
    if (!(cond < 1e12))
        throw SolverError("ill-conditioned Fredholm system, condition estimate " +
                          std::to_string(cond));
    Eigen::VectorXd phi = lu.solve(r);

    double res = (M * phi - r).cwiseAbs().maxCoeff();

    std::vector<double> xs(q.nodes.begin(), q.nodes.end());
    std::vector<double> vs(phi.data(), phi.data() + nq);
    std::optional<GridFunction::Jump> jump;
    if (want_jump) {
        double t = p.rhs_jump->location;
        jump = GridFunction::Jump{t, phi[nq], phi[nq + 1]};
        auto it = std::lower_bound(xs.begin(), xs.end(), t);
        auto pos = it - xs.begin();
        xs.insert(it, t);
        vs.insert(vs.begin() + pos, phi[nq + 1]);
    }
    FredholmSolution sol;
    sol.solution = GridFunction(std::move(xs), std::move(vs), jump);
    sol.residual_sup = res;
    sol.grid_size = grid_size;
    sol.condition_estimate = cond;
    sol.quadrature = q;
    return sol;
}

// Reconstruct midpoint panel weights from the node sequence.
inline QuadratureGrid weights_from_nodes(const std::vector<double>& nodes, double a, double b) {
    QuadratureGrid q;
    q.nodes = nodes;
    q.weights.resize(nodes.size());
    double lo = a;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        double hi = 2.0 * nodes[i] - lo;
        q.weights[i] = hi - lo;
        lo = hi;
    }
    if (std::abs(lo - b) > 1e-6 * (b - a)) {
        // not a midpoint grid; fall back to half-gap weights
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            double left = (i == 0) ? a : 0.5 * (nodes[i - 1] + nodes[i]);
            double right = (i + 1 == nodes.size()) ? b : 0.5 * (nodes[i] + nodes[i + 1]);
            q.weights[i] = right - left;
        }
    }
    return q;
}

}  // namespace detail

inline FredholmSolution solve_second_kind(const FredholmProblem& p, int grid_size) {
    if (grid_size < 16) throw std::invalid_argument("solve_second_kind: grid_size < 16");
    detail::Discretization d;
    d.q = build_open_grid(p.a, p.b, grid_size, p.singular_left, p.singular_right,
                          p.breakpoints);
    return detail::solve_discretized(p, d, grid_size, false);
}

// The rhs jump location becomes a doubled node: two zero-weight collocation
// rows carry the one-sided rhs limits, so the solution stores left/right
// values at t while the quadrature never straddles the discontinuity.
inline FredholmSolution solve_with_jump(const FredholmProblem& p, int grid_size) {
    if (grid_size < 16) throw std::invalid_argument("solve_with_jump: grid_size < 16");
    if (!p.rhs_jump) throw std::invalid_argument("solve_with_jump: no rhs_jump set");
    double t = p.rhs_jump->location;
    if (!(t > p.a && t < p.b))
        throw std::invalid_argument("solve_with_jump: jump not strictly interior");
    detail::Discretization d;
    std::vector<double> brk = p.breakpoints;
    brk.push_back(t);
    d.q = build_open_grid(p.a, p.b, grid_size, p.singular_left, p.singular_right, brk);
    d.extra_nodes = {t, t};
    d.extra_rhs = {p.rhs_jump->left, p.rhs_jump->right};
    return detail::solve_discretized(p, d, grid_size, true);
}

// Sup-norm residual of `candidate` under the module's quadrature, using the
// candidate's own nodes as both collocation and quadrature points.
inline double residual(const FredholmProblem& p, const GridFunction& candidate) {
    // the doubled jump node (if any) is collocation-only, never quadrature
    std::vector<double> nodes;
    for (double x : candidate.grid())
        if (!candidate.jump() || std::abs(x - candidate.jump()->location) > 1e-14)
            nodes.push_back(x);
    QuadratureGrid q = detail::weights_from_nodes(nodes, p.a, p.b);
    std::vector<double> phi(q.nodes.size());
    for (std::size_t j = 0; j < q.nodes.size(); ++j) phi[j] = candidate.eval(q.nodes[j]);

    auto op_at = [&](double x) {
        double s = 0.0;
        for (std::size_t j = 0; j < q.nodes.size(); ++j)
            s += q.weights[j] * p.kernel(x, q.nodes[j]) * phi[j];
        return s;
    };
    double res = 0.0;
    for (std::size_t i = 0; i < q.nodes.size(); ++i)
        res = std::max(res, std::abs(phi[i] + op_at(q.nodes[i]) - p.rhs(q.nodes[i])));
    if (candidate.jump()) {
        double t = candidate.jump()->location;
        double s = op_at(t);
        double rl = p.rhs_jump ? p.rhs_jump->left : p.rhs(t);
        double rr = p.rhs_jump ? p.rhs_jump->right : p.rhs(t);
        res = std::max({res, std::abs(candidate.jump()->left + s - rl),
                        std::abs(candidate.jump()->right + s - rr)});
    }
    return res;
}

// Writes the dense Nystrom matrix and rhs as CSV for offline inspection.
inline void dump_system(const FredholmProblem& p, int grid_size, std::ostream& matrix_out,
                        std::ostream& rhs_out) {
    std::vector<double> brk = p.breakpoints;
    if (p.rhs_jump) brk.push_back(p.rhs_jump->location);
    QuadratureGrid q = build_open_grid(p.a, p.b, grid_size, p.singular_left, p.singular_right, brk);
    std::size_t n = q.nodes.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double v = q.weights[j] * p.kernel(q.nodes[i], q.nodes[j]) + (i == j ? 1.0 : 0.0);
            matrix_out << v << (j + 1 < n ? "," : "\n");
        }
        rhs_out << p.rhs(q.nodes[i]) << "\n";
    }
}

}  // namespace iceq::fredholm
