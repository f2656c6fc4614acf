#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "iceq/core.hpp"
#include "iceq/deconv.hpp"
#include "iceq/icens.hpp"
#include "iceq/msle.hpp"
#include "iceq/quadrature.hpp"

namespace iceq::simulate {

namespace detail {

// splitmix64 mixer for per-replication seeds
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t rep_seed(std::uint64_t master, std::uint64_t index) {
    return mix64(master ^ mix64(index + 1));
}

inline double sample_from_cdf(const Cdf& F0, double u) {
    if (F0.inverse) return F0.inverse(u);
    // bisection fallback
    double lo = F0.a, hi = F0.b;
    for (int i = 0; i < 200 && hi - lo > 1e-14; ++i) {
        double mid = 0.5 * (lo + hi);
        (F0.eval(mid) < u ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline double sample_kernel(const deconv::ConvolutionKernel& g, double u) {
    using Family = deconv::ConvolutionKernel::Family;
    switch (g.family) {
        case Family::Uniform:
            return u;
        case Family::Exponential:
            return -std::log1p(-u);
        case Family::Elbow:
            return 1.0 - std::sqrt(1.0 - u);
        case Family::TabulatedDecreasing: {
            double lo = 0.0, hi = g.support;
            for (int i = 0; i < 200 && hi - lo > 1e-14; ++i) {
                double mid = 0.5 * (lo + hi);
                (g.cdf(mid) < u ? lo : hi) = mid;
            }
            return 0.5 * (lo + hi);
        }
    }
    throw std::logic_error("sample_kernel: unknown family");
}

}  // namespace detail

// Pairs (T,U) uniform on the separated triangle by rejection from the unit
// square (acceptance rate (1-eps)^2 / 2), X ~ F0 by inverse cdf, indicators
// delta1 = 1{X<=T}, delta2 = 1{T<X<=U}.
inline icens::IcSample gen_interval_censored(std::size_t n, const Cdf& F0,
                                             const icens::ObservationModel& model,
                                             std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    icens::IcSample s;
    s.obs.reserve(n);
    double eps = model.epsilon;
    for (std::size_t i = 0; i < n; ++i) {
        double x = detail::sample_from_cdf(F0, U(rng));
        double t, u;
        do {
            t = U(rng);
            u = U(rng);
        } while (!(u - t > eps));
        int d1 = x <= t ? 1 : 0;
        int d2 = (!d1 && x <= u) ? 1 : 0;
        s.obs.push_back({t, u, d1, d2});
    }
    return s;
}

inline deconv::DeconvSample gen_deconv(std::size_t n, const Cdf& F0,
                                       const deconv::ConvolutionKernel& g,
                                       std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    deconv::DeconvSample s;
    s.z.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = detail::sample_from_cdf(F0, U(rng));
        double y = detail::sample_kernel(g, U(rng));
        s.z.push_back(x + y);
    }
    return s;
}

struct McConfig {
    enum class Model { IntervalCensoring, Deconvolution };
    enum class Estimator { Mle, Msle };

    Model model = Model::IntervalCensoring;
    Estimator estimator = Estimator::Mle;
    Cdf F0;
    icens::ObservationModel obs;          // interval censoring
    deconv::ConvolutionKernel kernel;     // deconvolution
    std::size_t n = 0;
    int reps = 0;
    std::uint64_t seed = 0;
    FunctionalSpec functional;
    double bandwidth = 0.0;  // MSLE only
    int msle_grid = 200;
    double tol = 1e-8;
    int threads = 1;

    void validate() const {
        if (n < 1) throw std::invalid_argument("McConfig: n < 1");
        if (reps < 1) throw std::invalid_argument("McConfig: reps < 1");
        if (estimator == Estimator::Msle && !(bandwidth > 0.0))
            throw std::invalid_argument("McConfig: MSLE needs a bandwidth");
    }

    std::string canonical() const {
        std::ostringstream os;
        os << (model == Model::IntervalCensoring ? "ic" : "deconv") << "|"
           << (estimator == Estimator::Mle ? "mle" : "msle") << "|" << F0.label << "|";
        if (model == Model::IntervalCensoring)
            os << model_key();
        else
            os << kernel.label;
        os << "|n=" << n << "|reps=" << reps << "|seed=" << seed << "|f=" << functional.label
           << "|bw=" << bandwidth << "|tol=" << tol;
        return os.str();
    }

    std::uint64_t hash() const {
        // FNV-1a over the canonical description
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : canonical()) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        return h;
    }

private:
    std::string model_key() const {
        std::ostringstream os;
        os << obs.family << ",eps=" << obs.epsilon;
        return os.str();
    }
};

struct McResult {
    double variance = 0.0;        // sample variance of sqrt(n) * (estimate - truth)
    double standard_error = 0.0;  // MC standard error of that variance
    double mean_stat = 0.0;
    std::vector<double> stats;    // per replication, in index order
};

namespace detail {

inline double plugin_msle(const GridFunction& F, const FunctionalSpec& spec) {
    // Stieltjes sum of the gradient against dF on the tabulation grid
    const auto& x = F.grid();
    const auto& v = F.values();
    double s = spec.gradient(x.front()) * v.front();
    for (std::size_t i = 1; i < x.size(); ++i)
        s += spec.gradient(0.5 * (x[i - 1] + x[i])) * (v[i] - v[i - 1]);
    return s;
}

}  // namespace detail

// Per-replication statistic sqrt(n) * (plug-in functional - K(F0)); returns
// the sample variance and its moment-based MC standard error. Replication
// seeds come from the master seed through the splitmix64 mixer, so results
// are independent of the thread count.
inline McResult mc_functional_variance(const McConfig& cfg) {
    cfg.validate();
    if (cfg.reps < 100) throw std::invalid_argument("mc_functional_variance: reps < 100");

    double truth;
    if (cfg.F0.density) {
        truth = midpoint_integrate(
            [&](double x) { return cfg.functional.gradient(x) * cfg.F0.density(x); }, cfg.F0.a,
            cfg.F0.b, 20000);
    } else {
        throw std::invalid_argument("mc_functional_variance: F0 density required");
    }

    std::vector<double> stats(cfg.reps);
    auto run_rep = [&](int r) {
        std::uint64_t s = detail::rep_seed(cfg.seed, static_cast<std::uint64_t>(r));
        double est;
        try {
            if (cfg.model == McConfig::Model::IntervalCensoring) {
                auto sample = gen_interval_censored(cfg.n, cfg.F0, cfg.obs, s);
                if (cfg.estimator == McConfig::Estimator::Mle) {
                    // a tiny fraction of samples needs far more EM/ICM sweeps
                    // than the default cap to drain near-zero support masses
                    auto fit = icens::fit_mle_case2(sample, cfg.tol, 300000);
                    est = integrate_against(fit.F, cfg.functional.gradient);
                } else {
                    auto sd = msle::smooth_densities(sample, {cfg.bandwidth, true}, cfg.obs.M);
                    auto fit = msle::fit_msle(sd, cfg.msle_grid, cfg.tol, 5000, true);
                    est = detail::plugin_msle(fit.F, cfg.functional);
                }
            } else {
                auto sample = gen_deconv(cfg.n, cfg.F0, cfg.kernel, s);
                auto fit = deconv::fit_mle_deconv(sample, cfg.kernel, cfg.tol);
                est = integrate_against(fit.F, cfg.functional.gradient);
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("mc_functional_variance: replication " + std::to_string(r) +
                                     " (seed " + std::to_string(s) + ") failed: " + e.what());
        }
        stats[r] = std::sqrt(static_cast<double>(cfg.n)) * (est - truth);
    };

    int nt = std::max(1, cfg.threads);
    if (nt == 1) {
        for (int r = 0; r < cfg.reps; ++r) run_rep(r);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errs(nt);
        for (int w = 0; w < nt; ++w)
            pool.emplace_back([&, w]() {
                try {
                    for (int r = w; r < cfg.reps; r += nt) run_rep(r);
                } catch (...) {
                    errs[w] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);
    }

    McResult out;
    out.stats = stats;
    double m = 0.0;
    for (double v : stats) m += v;
    m /= cfg.reps;
    out.mean_stat = m;
    double m2 = 0.0, m4 = 0.0;
    for (double v : stats) {
        double d = v - m;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    out.variance = m2 / (cfg.reps - 1);
    m2 /= cfg.reps;
    m4 /= cfg.reps;
    out.standard_error = std::sqrt(std::max(0.0, m4 - m2 * m2) / cfg.reps);
    return out;
}

// Appends `config_hash,estimate,se,reps,n,seed` to the ledger file.
inline void append_ledger(const std::string& path, const McConfig& cfg, const McResult& res) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("append_ledger: cannot open " + path);
    os.precision(12);
    os << cfg.hash() << "," << res.variance << "," << res.standard_error << "," << cfg.reps
       << "," << cfg.n << "," << cfg.seed << "\n";
}

}  // namespace iceq::simulate
