#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "iceq/deconv.hpp"

using namespace iceq;
using deconv::ConvolutionKernel;
using deconv::DeconvSample;

namespace {

DeconvSample sample_sum(std::mt19937_64& rng, int n, const Cdf& F0,
                        const ConvolutionKernel& g) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    DeconvSample s;
    for (int i = 0; i < n; ++i) {
        double x = F0.inverse(unif(rng));
        double y;
        switch (g.family) {
            case ConvolutionKernel::Family::Uniform:
                y = unif(rng);
                break;
            case ConvolutionKernel::Family::Elbow:
                y = 1.0 - std::sqrt(1.0 - unif(rng));
                break;
            default:
                y = -std::log(1.0 - unif(rng));
                break;
        }
        s.z.push_back(x + y);
    }
    return s;
}

}  // namespace

TEST_CASE("convolution kernels are decreasing densities", "[deconv]") {
    for (auto g : {ConvolutionKernel::uniform(), ConvolutionKernel::exponential(),
                   ConvolutionKernel::elbow()}) {
        CHECK(g.g(0.0) == Catch::Approx(g.g0));
        double hi = std::isfinite(g.support) ? g.support : 30.0;
        double mass = midpoint_integrate(g.g, 0.0, hi, 20000);
        CHECK(mass == Catch::Approx(1.0).margin(1e-6));
        // cdf is the integral of g
        for (double w : {0.2, 0.6, 0.9}) {
            double q = midpoint_integrate(g.g, 0.0, w, 20000);
            CHECK(g.cdf(w) == Catch::Approx(q).margin(1e-6));
        }
        // decreasing on the support
        for (double w = 0.05; w < std::min(hi, 3.0) - 0.05; w += 0.05)
            CHECK(g.g(w + 0.05) <= g.g(w) + 1e-12);
        if (g.gprime)
            for (double w : {0.25, 0.5, 0.75}) {
                double fd = (g.g(w + 1e-6) - g.g(w - 1e-6)) / 2e-6;
                CHECK(g.gprime(w) == Catch::Approx(fd).margin(1e-5));
            }
    }
}

TEST_CASE("tabulated kernels validate their input", "[deconv]") {
    std::vector<double> xs{0.0, 0.5, 1.0};
    GridFunction gv(xs, {2.0, 1.0, 0.0});
    GridFunction gpv(xs, {-2.0, -2.0, -2.0});
    auto k = ConvolutionKernel::tabulated(gv, gpv);
    CHECK(k.g0 == Catch::Approx(2.0));
    CHECK(k.g(0.25) == Catch::Approx(1.5));
    CHECK(k.cdf(1.0) == Catch::Approx(1.0).margin(1e-12));

    GridFunction rising(xs, {0.0, 1.0, 2.0});
    CHECK_THROWS_AS(ConvolutionKernel::tabulated(rising, gpv), std::invalid_argument);
    GridFunction small(xs, {0.5, 0.25, 0.0});
    CHECK_THROWS_AS(ConvolutionKernel::tabulated(small, gpv), std::invalid_argument);
}

TEST_CASE("observation densities match direct convolution", "[deconv]") {
    auto F0 = uniform_cdf();
    auto direct = [&](const ConvolutionKernel& g, double z) {
        double hi = std::isfinite(g.support) ? g.support : 40.0;
        return midpoint_integrate([&](double x) { return g.g(z - x) * F0.density(x); },
                                  std::max(0.0, z - hi), std::min(1.0, z), 20000);
    };
    auto elbow = deconv::h0_density(F0, ConvolutionKernel::elbow());
    CHECK(elbow(0.5) == Catch::Approx(0.75));
    for (double z : {0.3, 0.8, 1.2, 1.7})
        CHECK(elbow(z) == Catch::Approx(direct(ConvolutionKernel::elbow(), z)).margin(1e-5));

    auto expo = deconv::h0_density(F0, ConvolutionKernel::exponential());
    for (double z : {0.3, 0.9, 1.5, 3.0})
        CHECK(expo(z) ==
              Catch::Approx(direct(ConvolutionKernel::exponential(), z)).margin(1e-5));

    auto unif = deconv::h0_density(F0, ConvolutionKernel::uniform());
    for (double z : {0.3, 0.9, 1.5})
        CHECK(unif(z) == Catch::Approx(direct(ConvolutionKernel::uniform(), z)).margin(1e-5));

    // generic quadrature path for a non-uniform F0
    auto gen = deconv::h0_density(concave_quadratic_cdf(), ConvolutionKernel::elbow());
    double byhand = midpoint_integrate(
        [&](double x) { return 2.0 * (1.0 - (0.9 - x)) * 2.0 * (1.0 - x); }, 0.0, 0.9, 20000);
    CHECK(gen(0.9) == Catch::Approx(byhand).margin(1e-3));
}

TEST_CASE("uniform kernel data fold to current status observations", "[deconv]") {
    DeconvSample s{{0.4, 1.0, 1.3}};
    auto cs = deconv::uniform_to_current_status(s);
    REQUIRE(cs.size() == 3);
    CHECK(cs[0] == std::make_pair(0.4, 1));
    CHECK(cs[1] == std::make_pair(1.0, 1));
    CHECK(cs[2].first == Catch::Approx(0.3));
    CHECK(cs[2].second == 0);
    CHECK_THROWS_AS(deconv::uniform_to_current_status(DeconvSample{{2.5}}),
                    std::invalid_argument);
    CHECK(deconv::current_status_variance(uniform_cdf()) ==
          Catch::Approx(1.0 / 6.0).margin(1e-6));
}

TEST_CASE("exponential kernel closed forms", "[deconv]") {
    auto F0 = uniform_cdf();
    double t = 0.5;
    auto forms = deconv::exponential_closed_forms(t, F0);
    // K_t = int_0^t (e^{-(t-x)} - 1) dx = 1 - e^{-t} - t for uniform F0
    double K = 1.0 - std::exp(-t) - t;
    CHECK(forms.K == Catch::Approx(K).margin(1e-6));
    CHECK(forms.theta_low == Catch::Approx(-1.0 - K).margin(1e-6));
    CHECK(forms.theta_high == Catch::Approx(-K).margin(1e-6));
    CHECK(forms.H0_t == Catch::Approx(-K).margin(1e-6));
    double H0 = -K;
    CHECK(forms.sigma_sq ==
          Catch::Approx((1.0 + K) * (1.0 + K) * H0 + K * K * (1.0 - H0)).margin(1e-9));
    CHECK(forms.sigma_sq == Catch::Approx(0.095182).margin(1e-5));
    // the phi branches and the jump at t
    CHECK(forms.phi.eval(0.25) == Catch::Approx(-(1.0 + K) * 0.25).margin(1e-6));
    CHECK(forms.phi.eval(0.75) == Catch::Approx(-K * (0.75 - 1.0)).margin(1e-6));
    REQUIRE(forms.phi.discrete_jumps.size() == 1);
    CHECK(forms.phi.discrete_jumps[0].location == Catch::Approx(t));

    // the step-distribution overload approaches the smooth form
    int m = 2000;
    std::vector<double> pts(m), masses(m, 1.0 / m);
    for (int i = 0; i < m; ++i) pts[i] = (i + 0.5) / m;
    auto step = deconv::exponential_closed_forms(t, StepDistribution(pts, masses, 1.0));
    CHECK(step.K == Catch::Approx(K).margin(1e-4));
    CHECK_THROWS_AS(deconv::exponential_closed_forms(1.5, F0), std::invalid_argument);
}

TEST_CASE("mixture likelihood fit on degenerate and tiny samples", "[deconv]") {
    auto g = ConvolutionKernel::elbow();
    auto fit = deconv::fit_mle_deconv(DeconvSample{{0.7}}, g, 1e-9);
    REQUIRE(fit.F.num_jumps() == 1);
    CHECK(fit.F.jump_points()[0] == Catch::Approx(0.7).margin(1e-9));
    CHECK(fit.loglik == Catch::Approx(std::log(2.0)).margin(1e-9));

    CHECK_THROWS_AS(deconv::fit_mle_deconv(DeconvSample{}, g, 1e-9), std::invalid_argument);
    CHECK_THROWS_AS(deconv::fit_mle_deconv(DeconvSample{{0.0, 0.0}}, g, 1e-9),
                    std::invalid_argument);
    CHECK_THROWS_AS(deconv::fit_mle_deconv(DeconvSample{{0.5}}, g, -1.0),
                    std::invalid_argument);
}

TEST_CASE("uniform kernel fit routes through the current status solver", "[deconv]") {
    std::mt19937_64 rng(41);
    auto g = ConvolutionKernel::uniform();
    for (int rep = 0; rep < 3; ++rep) {
        auto s = sample_sum(rng, 60, uniform_cdf(), g);
        auto fit = deconv::fit_mle_deconv(s, g, 1e-9);
        auto cs = icens::fit_current_status(deconv::uniform_to_current_status(s));
        REQUIRE(fit.F.num_jumps() == cs.num_jumps());
        for (std::size_t i = 0; i < cs.num_jumps(); ++i) {
            CHECK(fit.F.jump_points()[i] == cs.jump_points()[i]);
            CHECK(fit.F.masses()[i] == cs.masses()[i]);
        }
    }
}

TEST_CASE("mixture fit satisfies its optimality certificates", "[deconv]") {
    std::mt19937_64 rng(88);
    auto g = ConvolutionKernel::elbow();
    auto F0 = uniform_cdf();
    for (int rep = 0; rep < 3; ++rep) {
        auto s = sample_sum(rng, 100, F0, g);
        auto fit = deconv::fit_mle_deconv(s, g, 1e-9);
        CHECK(fit.support_residual <= 1e-8);
        CHECK(fit.candidate_excess <= 1e-8);
        CHECK(fit.F.total_mass() == Catch::Approx(1.0).margin(1e-9));
        for (double z : s.z) CHECK(fit.hhat(z) > 0.0);
        // the certificate guarantees no competing mixture does better: try a
        // few random perturbations of the fitted masses
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (int k = 0; k < 5; ++k) {
            std::vector<double> masses = fit.F.masses();
            double tot = 0.0;
            for (double& p : masses) {
                p *= 0.5 + unif(rng);
                tot += p;
            }
            for (double& p : masses) p /= tot;
            StepDistribution G(fit.F.jump_points(), masses, fit.F.support_end());
            double ll = 0.0;
            for (double z : s.z) {
                double h = 0.0;
                for (std::size_t j = 0; j < G.num_jumps(); ++j)
                    h += G.masses()[j] * g.g(z - G.jump_points()[j]);
                ll += std::log(std::max(h, deconv::kDensityFloor));
            }
            CHECK(fit.loglik >= ll / s.n() - 1e-9);
        }
    }
}

TEST_CASE("first-moment influence function for the elbow kernel", "[deconv]") {
    auto F0 = uniform_cdf();
    auto g = ConvolutionKernel::elbow();
    auto sol = deconv::solve_phi_deconv(F0, g, first_moment_functional(), 800);
    CHECK(sol.residual_sup < 1e-6);
    auto tv = deconv::theta_and_variance_deconv(sol.solution, F0, g);
    CHECK(tv.variance == Catch::Approx(0.137).margin(3e-3));
    CHECK(std::abs(tv.mean) < 1e-3);
}

TEST_CASE("influence function integrates to the functional difference",
          "[deconv]") {
    auto F0 = uniform_cdf();
    auto g = ConvolutionKernel::elbow();
    auto sol = deconv::solve_phi_deconv(F0, g, first_moment_functional(), 800);
    auto tv = deconv::theta_and_variance_deconv(sol.solution, F0, g);
    // observation density when the event times follow G instead of F0
    auto G = concave_quadratic_cdf();
    auto hG = deconv::h0_density(G, g);
    double I = midpoint_integrate([&](double z) { return tv.theta_eval(z) * hG(z); }, 0.0,
                                  2.0, 4000);
    // first moments: 1/3 under G, 1/2 under F0
    CHECK(I == Catch::Approx(1.0 / 3.0 - 0.5).margin(5e-3));
}

TEST_CASE("local influence equation matches the exponential closed form",
          "[deconv]") {
    auto F0 = uniform_cdf();
    auto g = ConvolutionKernel::exponential();
    double t = 0.5;
    auto sol = deconv::solve_phi_local(t, F0, g, 800);
    auto forms = deconv::exponential_closed_forms(t, F0);
    REQUIRE(sol.solution.jump().has_value());
    CHECK(sol.solution.jump()->location == Catch::Approx(t));
    for (double x : {0.1, 0.3, 0.45, 0.6, 0.8, 0.95})
        CHECK(sol.solution.eval(x) == Catch::Approx(forms.phi.eval(x)).margin(1e-4));
    CHECK(sol.solution.jump()->left ==
          Catch::Approx(forms.phi.eval_at_left(t)).margin(1e-4));
    CHECK(sol.solution.jump()->right == Catch::Approx(forms.phi.eval(t)).margin(1e-4));
    CHECK_THROWS_AS(deconv::solve_phi_local(1.5, F0, g, 800), std::invalid_argument);
}

TEST_CASE("projected influence for the fitted mixture is orthogonal",
          "[deconv]") {
    std::mt19937_64 rng(5150);
    auto F0 = uniform_cdf();
    auto g = ConvolutionKernel::elbow();
    auto s = sample_sum(rng, 150, F0, g);
    auto fit = deconv::fit_mle_deconv(s, g, 1e-9);
    auto bp = deconv::bar_phi_matrix(fit, s, g, second_moment_functional());
    CHECK(std::abs(bp.orthogonality) <= 1e-8);
    // jumps only at the support points of the fit
    REQUIRE(bp.bar_phi.discrete_jumps.size() == fit.F.num_jumps());
    for (std::size_t k = 0; k < fit.F.num_jumps(); ++k)
        CHECK(bp.bar_phi.discrete_jumps[k].location ==
              Catch::Approx(fit.F.jump_points()[k]));
    // flat at zero below the first support point
    CHECK(bp.bar_phi.eval(fit.tau1 - 1e-6) == 0.0);

    // the mixture-driven phi equation solves cleanly on [tau1, taum]
    auto sol = deconv::solve_phi_mixture(fit, g, second_moment_functional(), 256);
    CHECK(sol.residual_sup < 1e-6);
    auto theta = deconv::theta_mixture_extended(fit, g, second_moment_functional(),
                                                sol.solution);
    for (double z : {0.1, 0.5, 1.0, 1.4}) CHECK(std::isfinite(theta(z)));
}

TEST_CASE("local scaling constants for the three kernel families", "[deconv]") {
    auto F0 = uniform_cdf();
    double t0 = 0.5;
    CHECK(deconv::local_scaling_constant_deconv(t0, F0, ConvolutionKernel::elbow(),
                                                deconv::LocalCaseDeconv::SmoothDecreasing) ==
          Catch::Approx(std::cbrt(8.0 / 0.75)).margin(1e-9));
    CHECK(deconv::local_scaling_constant_deconv(t0, F0, ConvolutionKernel::uniform(),
                                                deconv::LocalCaseDeconv::DiscontinuitySet) ==
          Catch::Approx(2.0).margin(1e-9));
    double h = 1.0 - std::exp(-0.5);
    CHECK(deconv::local_scaling_constant_deconv(t0, F0, ConvolutionKernel::exponential(),
                                                deconv::LocalCaseDeconv::DiscontinuitySet) ==
          Catch::Approx(std::cbrt(2.0 / h)).margin(1e-9));
}
