#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "iceq/fredholm.hpp"

using namespace iceq;
using fredholm::FredholmProblem;

namespace {

// Separable kernel constant in u: phi + x * int phi = x + 1 has the exact
// solution phi = 1, and the midpoint rule integrates it without error.
FredholmProblem constant_solution_problem() {
    FredholmProblem p;
    p.kernel = [](double x, double) { return x; };
    p.rhs = [](double x) { return x + 1.0; };
    return p;
}

// Separable kernel x*u with rhs x: solution phi(x) = 0.75 x.
FredholmProblem rank_one_problem() {
    FredholmProblem p;
    p.kernel = [](double x, double u) { return x * u; };
    p.rhs = [](double x) { return x; };
    return p;
}

double sup_error_rank_one(int grid) {
    auto sol = fredholm::solve_second_kind(rank_one_problem(), grid);
    double e = 0.0;
    for (std::size_t i = 0; i < sol.solution.grid().size(); ++i)
        e = std::max(e, std::abs(sol.solution.values()[i] - 0.75 * sol.solution.grid()[i]));
    return e;
}

}  // namespace

TEST_CASE("zero kernel returns the right-hand side", "[fredholm]") {
    FredholmProblem p;
    p.kernel = [](double, double) { return 0.0; };
    p.rhs = [](double x) { return std::sin(3.0 * x); };
    auto sol = fredholm::solve_second_kind(p, 64);
    for (std::size_t i = 0; i < sol.solution.grid().size(); ++i)
        CHECK(sol.solution.values()[i] ==
              Catch::Approx(std::sin(3.0 * sol.solution.grid()[i])).margin(1e-13));
    CHECK(sol.residual_sup < 1e-13);
}

TEST_CASE("separable kernel with exactly integrable solution", "[fredholm]") {
    auto sol = fredholm::solve_second_kind(constant_solution_problem(), 512);
    for (double v : sol.solution.values()) CHECK(v == Catch::Approx(1.0).margin(1e-10));
    CHECK(sol.residual_sup < 1e-12);
    CHECK(sol.condition_estimate > 1.0);
    CHECK(sol.condition_estimate < 100.0);
}

TEST_CASE("rank-one kernel matches the closed form and converges at second order",
          "[fredholm]") {
    double e512 = sup_error_rank_one(512);
    double e1024 = sup_error_rank_one(1024);
    double e2048 = sup_error_rank_one(2048);
    CHECK(e512 < 1e-6);
    CHECK(e1024 < 0.6 * e512);
    CHECK(e2048 < 0.6 * e1024);
}

TEST_CASE("solver output is linear in the right-hand side", "[fredholm]") {
    FredholmProblem p1 = rank_one_problem();
    FredholmProblem p2 = rank_one_problem();
    p2.rhs = [](double x) { return std::cos(x); };
    FredholmProblem ps = rank_one_problem();
    ps.rhs = [](double x) { return x + std::cos(x); };
    auto s1 = fredholm::solve_second_kind(p1, 256);
    auto s2 = fredholm::solve_second_kind(p2, 256);
    auto ss = fredholm::solve_second_kind(ps, 256);
    for (std::size_t i = 0; i < ss.solution.grid().size(); ++i)
        CHECK(ss.solution.values()[i] ==
              Catch::Approx(s1.solution.values()[i] + s2.solution.values()[i]).margin(1e-9));
}

TEST_CASE("jump in the right-hand side produces a doubled node", "[fredholm]") {
    FredholmProblem p;
    p.kernel = [](double, double) { return 0.0; };
    p.rhs = [](double x) { return x < 0.4 ? 0.0 : 1.0; };
    p.rhs_jump = FredholmProblem::RhsJump{0.4, 0.0, 1.0};
    auto sol = fredholm::solve_with_jump(p, 128);
    REQUIRE(sol.solution.jump().has_value());
    CHECK(sol.solution.jump()->location == Catch::Approx(0.4));
    CHECK(sol.solution.jump()->left == Catch::Approx(0.0).margin(1e-12));
    CHECK(sol.solution.jump()->right == Catch::Approx(1.0).margin(1e-12));
    CHECK(sol.solution.eval(0.39999) == Catch::Approx(0.0).margin(1e-6));
    CHECK(sol.solution.eval(0.4) == Catch::Approx(1.0).margin(1e-12));

    // a degenerate jump (equal one-sided limits) reduces to the smooth solve
    FredholmProblem pd = constant_solution_problem();
    pd.rhs_jump = FredholmProblem::RhsJump{0.5, 1.5, 1.5};
    auto sd = fredholm::solve_with_jump(pd, 128);
    CHECK(sd.solution.jump()->left == Catch::Approx(sd.solution.jump()->right).margin(1e-10));
    CHECK(sd.solution.eval(0.5) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("invalid jump placement and missing jump are rejected", "[fredholm]") {
    FredholmProblem p = constant_solution_problem();
    CHECK_THROWS_AS(fredholm::solve_with_jump(p, 128), std::invalid_argument);
    p.rhs_jump = FredholmProblem::RhsJump{1.0, 0.0, 1.0};
    CHECK_THROWS_AS(fredholm::solve_with_jump(p, 128), std::invalid_argument);
    CHECK_THROWS_AS(fredholm::solve_second_kind(constant_solution_problem(), 8),
                    std::invalid_argument);
}

TEST_CASE("singular and non-finite systems raise solver errors", "[fredholm]") {
    // kernel -1 makes I - (row of weights) singular since the weights sum to 1
    FredholmProblem p;
    p.kernel = [](double, double) { return -1.0; };
    p.rhs = [](double) { return 1.0; };
    CHECK_THROWS_AS(fredholm::solve_second_kind(p, 64), fredholm::SolverError);

    FredholmProblem q;
    q.kernel = [](double x, double u) { return 1.0 / (x - u); };
    q.rhs = [](double) { return 1.0; };
    CHECK_THROWS_AS(fredholm::solve_second_kind(q, 64), fredholm::SolverError);
}

TEST_CASE("residual evaluates candidates under the solver quadrature", "[fredholm]") {
    auto p = rank_one_problem();
    auto sol = fredholm::solve_second_kind(p, 256);
    CHECK(fredholm::residual(p, sol.solution) < 1e-10);

    std::vector<double> vs = sol.solution.values();
    for (double& v : vs) v += 0.01;
    GridFunction bad(sol.solution.grid(), vs);
    CHECK(fredholm::residual(p, bad) > 5e-3);
}

TEST_CASE("dumped system reproduces the solver output", "[fredholm]") {
    auto p = rank_one_problem();
    std::stringstream ms, rs;
    fredholm::dump_system(p, 64, ms, rs);

    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(ms, line)) {
        rows.emplace_back();
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) rows.back().push_back(std::stod(cell));
    }
    std::vector<double> rhs;
    while (std::getline(rs, line)) rhs.push_back(std::stod(line));
    REQUIRE(!rows.empty());
    REQUIRE(rows.size() == rows[0].size());
    REQUIRE(rows.size() == rhs.size());

    int n = static_cast<int>(rows.size());
    Eigen::MatrixXd M(n, n);
    Eigen::VectorXd r(n);
    for (int i = 0; i < n; ++i) {
        r[i] = rhs[i];
        for (int j = 0; j < n; ++j) M(i, j) = rows[i][j];
    }
    Eigen::VectorXd phi = M.partialPivLu().solve(r);

    auto sol = fredholm::solve_second_kind(p, 64);
    REQUIRE(static_cast<int>(sol.solution.values().size()) == n);
    for (int i = 0; i < n; ++i)
        CHECK(phi[i] == Catch::Approx(sol.solution.values()[i]).margin(1e-10));
}
