// Command line frontend: fitting, integral equation solves, variance
// computation and Monte Carlo runs. All outputs are CSV or one-line text
// records; exit codes are 0 success, 1 numerical failure, 2 bad input.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iceq/core.hpp"
#include "iceq/deconv.hpp"
#include "iceq/fredholm.hpp"
#include "iceq/functionals.hpp"
#include "iceq/icens.hpp"
#include "iceq/msle.hpp"
#include "iceq/simulate.hpp"

namespace {

using namespace iceq;

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- csv input

std::vector<std::vector<double>> read_csv(const std::string& path,
                                          const std::vector<std::string>& header) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw InputError(path + ": empty file");
    {
        std::ostringstream want;
        for (std::size_t i = 0; i < header.size(); ++i)
            want << (i ? "," : "") << header[i];
        std::string got = line;
        if (!got.empty() && got.back() == '\r') got.pop_back();
        if (got != want.str())
            throw InputError(path + ":1: expected header '" + want.str() + "', got '" + got +
                             "'");
    }
    std::vector<std::vector<double>> rows;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t pos = 0;
        for (std::size_t col = 0; col < header.size(); ++col) {
            std::size_t next = line.find(',', pos);
            std::string cell = line.substr(pos, next == std::string::npos ? next : next - pos);
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cell, &used));
                if (used != cell.size()) throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw InputError(path + ":" + std::to_string(lineno) + ": column " +
                                 std::to_string(col + 1) + " ('" + header[col] +
                                 "'): cannot parse '" + cell + "'");
            }
            if (next == std::string::npos) {
                if (col + 1 != header.size())
                    throw InputError(path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(header.size()) + " fields, got " +
                                     std::to_string(col + 1));
                pos = line.size();
            } else {
                pos = next + 1;
            }
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw InputError(path + ": no data rows");
    return rows;
}

icens::IcSample read_ic_sample(const std::string& path) {
    auto rows = read_csv(path, {"t", "u", "d1", "d2"});
    icens::IcSample s;
    int lineno = 1;
    for (const auto& r : rows) {
        ++lineno;
        auto flag = [&](double v, int col) {
            if (v != 0.0 && v != 1.0)
                throw InputError(path + ":" + std::to_string(lineno) + ": column " +
                                 std::to_string(col) + ": indicator must be 0 or 1");
            return static_cast<int>(v);
        };
        s.obs.push_back({r[0], r[1], flag(r[2], 3), flag(r[3], 4)});
    }
    try {
        s.validate();
    } catch (const std::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    return s;
}

std::vector<std::pair<double, int>> read_cs_sample(const std::string& path) {
    auto rows = read_csv(path, {"z", "delta"});
    std::vector<std::pair<double, int>> out;
    int lineno = 1;
    for (const auto& r : rows) {
        ++lineno;
        if (r[0] < 0.0)
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": column 1 ('z'): negative observation time");
        if (r[1] != 0.0 && r[1] != 1.0)
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": column 2 ('delta'): indicator must be 0 or 1");
        out.emplace_back(r[0], static_cast<int>(r[1]));
    }
    return out;
}

deconv::DeconvSample read_deconv_sample(const std::string& path) {
    auto rows = read_csv(path, {"z"});
    deconv::DeconvSample s;
    int lineno = 1;
    for (const auto& r : rows) {
        ++lineno;
        if (r[0] < 0.0)
            throw InputError(path + ":" + std::to_string(lineno) +
                             ": column 1 ('z'): negative observation");
        s.z.push_back(r[0]);
    }
    return s;
}

// --------------------------------------------------------------- csv output

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot open output file " + path);
    os.precision(12);
    return os;
}

void write_step(const std::string& path, const StepDistribution& F) {
    auto os = open_out(path);
    os << "x,mass\n";
    const auto& xs = F.jump_points();
    const auto& ps = F.masses();
    for (std::size_t i = 0; i < xs.size(); ++i) os << xs[i] << "," << ps[i] << "\n";
}

void write_grid(const std::string& path, const GridFunction& f) {
    auto os = open_out(path);
    os << "x,value\n";
    const auto& xs = f.grid();
    const auto& vs = f.values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (f.jump() && std::abs(xs[i] - f.jump()->location) < 1e-14)
            os << xs[i] << "," << f.jump()->left << "," << f.jump()->right << "\n";
        else
            os << xs[i] << "," << vs[i] << "\n";
    }
}

void write_pairs(const std::string& path, const std::string& header,
                 const std::vector<std::pair<double, double>>& rows) {
    auto os = open_out(path);
    os << header << "\n";
    for (const auto& [a, b] : rows) os << a << "," << b << "\n";
}

// ------------------------------------------------------------ model lookups

struct ModelChoice {
    bool is_ic = false;
    deconv::ConvolutionKernel kernel;  // valid when !is_ic
};

ModelChoice parse_model(const std::string& name) {
    if (name == "ic-triangle") return {true, {}};
    if (name == "deconv-uniform") return {false, deconv::ConvolutionKernel::uniform()};
    if (name == "deconv-exponential") return {false, deconv::ConvolutionKernel::exponential()};
    if (name == "deconv-elbow") return {false, deconv::ConvolutionKernel::elbow()};
    throw InputError("unknown model '" + name +
                     "' (expected ic-triangle, deconv-uniform, deconv-exponential, "
                     "deconv-elbow)");
}

Cdf parse_f0(const std::string& name) {
    if (name == "uniform") return uniform_cdf();
    if (name == "concave-quadratic") return concave_quadratic_cdf();
    throw InputError("unknown f0 '" + name + "' (expected uniform, concave-quadratic)");
}

FunctionalSpec parse_functional(const std::string& name) {
    if (name == "mean") return first_moment_functional();
    if (name == "second-moment") return second_moment_functional();
    throw InputError("unknown functional '" + name + "' (expected mean, second-moment)");
}

void dump_problem(const fredholm::FredholmProblem& p, int grid, const std::string& prefix) {
    auto mos = open_out(prefix + "_matrix.csv");
    auto ros = open_out(prefix + "_rhs.csv");
    fredholm::dump_system(p, grid, mos, ros);
}

// ------------------------------------------------------------------- verbs

int run_fit_ic(const std::string& in, double tol, const std::string& out) {
    auto sample = read_ic_sample(in);
    auto fit = icens::fit_mle_case2(sample, tol);
    if (!out.empty()) write_step(out, fit.F);
    std::cout << "{\"loglik\": " << fit.loglik << ", \"iterations\": " << fit.iterations
              << ", \"fenchel_violation\": " << fit.residuals.max_violation
              << ", \"support_slack\": " << fit.residuals.support_slack
              << ", \"support_points\": " << fit.F.jump_points().size() << "}\n";
    return 0;
}

int run_fit_cs(const std::string& in, const std::string& out) {
    auto pairs = read_cs_sample(in);
    auto F = icens::fit_current_status(pairs);
    if (!out.empty()) write_step(out, F);
    std::cout << "{\"support_points\": " << F.jump_points().size()
              << ", \"total_mass\": " << F.cdf(1e300) << "}\n";
    return 0;
}

int run_fit_deconv(const std::string& in, const std::string& model, double tol,
                   const std::string& out) {
    auto mc = parse_model(model);
    if (mc.is_ic) throw InputError("fit-deconv requires a deconv-* model");
    auto sample = read_deconv_sample(in);
    auto fit = deconv::fit_mle_deconv(sample, mc.kernel, tol);
    if (!out.empty()) write_step(out, fit.F);
    std::cout << "{\"loglik\": " << fit.loglik << ", \"iterations\": " << fit.iterations
              << ", \"support_residual\": " << fit.support_residual
              << ", \"candidate_excess\": " << fit.candidate_excess
              << ", \"support_points\": " << fit.F.jump_points().size() << "}\n";
    return 0;
}

int run_msle(const std::string& in, double epsilon, double bandwidth, int grid, double tol,
             const std::string& out) {
    auto sample = read_ic_sample(in);
    auto model = icens::ObservationModel::uniform_triangle(epsilon);
    auto sd = msle::smooth_densities(sample, {bandwidth, true}, model.M);
    auto fit = msle::fit_msle(sd, grid, tol, 5000, true);
    if (!out.empty()) write_grid(out, fit.F);
    std::cout << "{\"residual_sup\": " << fit.residual_sup
              << ", \"iterations\": " << fit.iterations
              << ", \"monotonicity_violations\": " << fit.monotonicity_violations << "}\n";
    return 0;
}

int run_phi(const std::string& model, double epsilon, const std::string& functional,
            const std::string& f0name, int grid, std::optional<double> t,
            const std::string& out, const std::string& dump) {
    auto mc = parse_model(model);
    auto spec = parse_functional(functional);
    Cdf F0 = parse_f0(f0name);
    if (mc.is_ic) {
        if (t) throw InputError("phi --t is only available for deconv-* models");
        if (!dump.empty())
            throw InputError("--dump-system is only available for deconv-* models");
        auto obs = icens::ObservationModel::uniform_triangle(epsilon);
        auto phi = functionals::solve_phi_smooth(obs, F0, spec, grid);
        if (!out.empty()) write_grid(out, phi.smooth_part);
        std::cout << "phi," << model << "," << grid << "," << phi.residual_sup << ","
                  << phi.condition_estimate << "\n";
        return 0;
    }
    fredholm::FredholmProblem p =
        t ? deconv::phi_local_problem(*t, F0, mc.kernel)
          : deconv::phi_deconv_problem(F0, mc.kernel, spec);
    if (!dump.empty()) dump_problem(p, grid, dump);
    auto sol = t ? fredholm::solve_with_jump(p, grid) : fredholm::solve_second_kind(p, grid);
    if (!out.empty()) write_grid(out, sol.solution);
    std::cout << "phi," << model << "," << sol.grid_size << "," << sol.residual_sup << ","
              << sol.condition_estimate << "\n";
    return 0;
}

int run_theta(const std::string& model, const std::string& functional,
              const std::string& f0name, int grid, const std::string& out) {
    auto mc = parse_model(model);
    if (mc.is_ic)
        throw InputError("theta exports are only available for deconv-* models");
    auto spec = parse_functional(functional);
    Cdf F0 = parse_f0(f0name);
    auto sol = deconv::solve_phi_deconv(F0, mc.kernel, spec, grid);
    auto tv = deconv::theta_and_variance_deconv(sol.solution, F0, mc.kernel);
    if (!out.empty()) write_grid(out, tv.theta);
    std::cout << "theta_variance," << model << "," << grid << "," << tv.variance << ","
              << sol.residual_sup << "\n";
    return 0;
}

int run_variance(const std::string& model, double epsilon, const std::string& functional,
                 const std::string& f0name, int grid) {
    auto mc = parse_model(model);
    auto spec = parse_functional(functional);
    Cdf F0 = parse_f0(f0name);
    if (mc.is_ic) {
        auto obs = icens::ObservationModel::uniform_triangle(epsilon);
        auto phi = functionals::solve_phi_smooth(obs, F0, spec, grid);
        double v = functionals::asymptotic_variance(phi, obs, F0);
        std::cout << "limit_var," << v << "," << grid << "," << phi.residual_sup << "\n";
        return 0;
    }
    auto sol = deconv::solve_phi_deconv(F0, mc.kernel, spec, grid);
    auto tv = deconv::theta_and_variance_deconv(sol.solution, F0, mc.kernel);
    std::cout << "limit_var," << tv.variance << "," << grid << "," << sol.residual_sup << "\n";
    return 0;
}

int run_xi(const std::string& model, double epsilon, double t, const std::string& f0name) {
    auto mc = parse_model(model);
    Cdf F0 = parse_f0(f0name);
    if (mc.is_ic) {
        auto obs = icens::ObservationModel::uniform_triangle(epsilon);
        double xi = functionals::xi_scaling_constant(t, obs, F0);
        auto ls = functionals::local_limit_scale(t, obs, F0, functionals::LocalCase::Separated);
        std::cout << "xi," << xi << ",scale," << ls.scale << ",rate," << ls.rate_label << "\n";
        return 0;
    }
    auto kind = mc.kernel.family == deconv::ConvolutionKernel::Family::Elbow
                    ? deconv::LocalCaseDeconv::SmoothDecreasing
                    : deconv::LocalCaseDeconv::DiscontinuitySet;
    double c = deconv::local_scaling_constant_deconv(t, F0, mc.kernel, kind);
    std::cout << "local_scale," << c << ",rate,n^{1/3}\n";
    return 0;
}

int run_simulate(const std::string& model, const std::string& estimator, double epsilon,
                 std::size_t n, int reps, std::uint64_t seed, const std::string& functional,
                 double bandwidth, int grid, double tol, int threads,
                 const std::string& f0name, const std::string& out,
                 const std::string& sample_out) {
    auto mc = parse_model(model);
    Cdf F0 = parse_f0(f0name);

    simulate::McConfig cfg;
    cfg.model = mc.is_ic ? simulate::McConfig::Model::IntervalCensoring
                         : simulate::McConfig::Model::Deconvolution;
    if (estimator == "mle")
        cfg.estimator = simulate::McConfig::Estimator::Mle;
    else if (estimator == "msle")
        cfg.estimator = simulate::McConfig::Estimator::Msle;
    else
        throw InputError("unknown estimator '" + estimator + "' (expected mle, msle)");
    cfg.F0 = F0;
    if (mc.is_ic)
        cfg.obs = icens::ObservationModel::uniform_triangle(epsilon);
    else
        cfg.kernel = mc.kernel;
    cfg.n = n;
    cfg.reps = reps;
    cfg.seed = seed;
    cfg.functional = parse_functional(functional);
    cfg.bandwidth = bandwidth;
    cfg.msle_grid = grid;
    cfg.tol = tol;
    cfg.threads = threads;

    std::cout << "# model=" << model << " estimator=" << estimator << " f0=" << f0name
              << " n=" << n << " reps=" << reps << " seed=" << seed
              << " functional=" << functional;
    if (mc.is_ic) std::cout << " epsilon=" << epsilon;
    if (cfg.estimator == simulate::McConfig::Estimator::Msle)
        std::cout << " bandwidth=" << bandwidth << " grid=" << grid;
    std::cout << " tol=" << tol << " threads=" << threads << "\n";
    std::cout << "# config_hash=" << cfg.hash() << "\n";

    if (!sample_out.empty()) {
        if (mc.is_ic) {
            auto s = simulate::gen_interval_censored(n, F0, cfg.obs, seed);
            auto os = open_out(sample_out);
            os << "t,u,d1,d2\n";
            for (const auto& o : s.obs)
                os << o.t << "," << o.u << "," << o.delta1 << "," << o.delta2 << "\n";
        } else {
            auto s = simulate::gen_deconv(n, F0, mc.kernel, seed);
            auto os = open_out(sample_out);
            os << "z\n";
            for (double z : s.z) os << z << "\n";
        }
        if (reps == 0) return 0;  // sample export only
    }

    auto res = simulate::mc_functional_variance(cfg);
    std::cout << "variance," << res.variance << ",se," << res.standard_error << ",mean,"
              << res.mean_stat << "\n";
    if (!out.empty()) simulate::append_ledger(out, cfg, res);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Nonparametric estimation under interval censoring and deconvolution"};
    app.require_subcommand(1);
    // key=value config with a [simulate] section; explicit flags take precedence
    app.set_config("--config");

    std::string in, out, model, functional = "mean", f0name = "uniform", estimator = "mle";
    std::string dump, sample_out;
    double epsilon = 0.1, bandwidth = 0.0, tol = 1e-8, t = 0.5;
    int grid = 2000, reps = 0, threads = 1;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    bool t_set = false;

    auto* fit_ic = app.add_subcommand("fit-ic", "Interval censoring case 2 MLE");
    fit_ic->add_option("--in", in, "sample CSV (t,u,d1,d2)")->required();
    fit_ic->add_option("--tol", tol, "Fenchel tolerance");
    fit_ic->add_option("--out", out, "fitted step distribution CSV");

    auto* fit_cs = app.add_subcommand("fit-cs", "Current status MLE");
    fit_cs->add_option("--in", in, "sample CSV (z,delta)")->required();
    fit_cs->add_option("--out", out, "fitted step distribution CSV");

    auto* fit_dc = app.add_subcommand("fit-deconv", "Deconvolution MLE");
    fit_dc->add_option("--in", in, "sample CSV (z)")->required();
    fit_dc->add_option("--model", model, "deconv-uniform|deconv-exponential|deconv-elbow")
        ->required();
    fit_dc->add_option("--tol", tol, "support reduction tolerance");
    fit_dc->add_option("--out", out, "fitted step distribution CSV");

    auto* msle_cmd = app.add_subcommand("msle", "Smoothed MLE for interval censoring");
    msle_cmd->add_option("--in", in, "sample CSV (t,u,d1,d2)")->required();
    msle_cmd->add_option("--epsilon", epsilon, "triangle separation");
    msle_cmd->add_option("--bandwidth", bandwidth, "kernel bandwidth")->required();
    msle_cmd->add_option("--grid", grid, "fixed point grid size");
    msle_cmd->add_option("--tol", tol, "fixed point tolerance");
    msle_cmd->add_option("--out", out, "fitted distribution function CSV");

    auto* phi_cmd = app.add_subcommand("phi", "Solve the efficiency integral equation");
    phi_cmd->add_option("--model", model, "ic-triangle|deconv-*")->required();
    phi_cmd->add_option("--epsilon", epsilon, "triangle separation (ic-triangle)");
    phi_cmd->add_option("--functional", functional, "mean|second-moment");
    phi_cmd->add_option("--f0", f0name, "uniform|concave-quadratic");
    phi_cmd->add_option("--grid", grid, "grid size");
    phi_cmd->add_option("--t", t, "local problem location (deconv only)")
        ->each([&](const std::string&) { t_set = true; });
    phi_cmd->add_option("--out", out, "phi CSV");
    phi_cmd->add_option("--dump-system", dump, "write <prefix>_matrix.csv and <prefix>_rhs.csv");

    auto* theta_cmd = app.add_subcommand("theta", "Canonical gradient for deconvolution");
    theta_cmd->add_option("--model", model, "deconv-*")->required();
    theta_cmd->add_option("--functional", functional, "mean|second-moment");
    theta_cmd->add_option("--f0", f0name, "uniform|concave-quadratic");
    theta_cmd->add_option("--grid", grid, "grid size");
    theta_cmd->add_option("--out", out, "theta CSV");

    auto* var_cmd = app.add_subcommand("variance", "Asymptotic variance of the plug-in MLE");
    var_cmd->add_option("--model", model, "ic-triangle|deconv-*")->required();
    var_cmd->add_option("--epsilon", epsilon, "triangle separation (ic-triangle)");
    var_cmd->add_option("--functional", functional, "mean|second-moment");
    var_cmd->add_option("--f0", f0name, "uniform|concave-quadratic");
    var_cmd->add_option("--grid", grid, "grid size");

    auto* xi_cmd = app.add_subcommand("xi", "Local limit scaling constants");
    xi_cmd->add_option("--model", model, "ic-triangle|deconv-*")->required();
    xi_cmd->add_option("--epsilon", epsilon, "triangle separation (ic-triangle)");
    xi_cmd->add_option("--t", t, "evaluation point")->required();
    xi_cmd->add_option("--f0", f0name, "uniform|concave-quadratic");

    auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo functional variance");
    sim_cmd->add_option("--model", model, "ic-triangle|deconv-*")->required();
    sim_cmd->add_option("--estimator", estimator, "mle|msle");
    sim_cmd->add_option("--epsilon", epsilon, "triangle separation (ic-triangle)");
    sim_cmd->add_option("--n", n, "sample size per replication")->required();
    sim_cmd->add_option("--reps", reps, "replications (0 with --sample-out: export only)")
        ->required();
    sim_cmd->add_option("--seed", seed, "master seed")->required();
    sim_cmd->add_option("--functional", functional, "mean|second-moment");
    sim_cmd->add_option("--bandwidth", bandwidth, "MSLE bandwidth");
    sim_cmd->add_option("--grid", grid, "MSLE grid size");
    sim_cmd->add_option("--tol", tol, "fit tolerance");
    sim_cmd->add_option("--threads", threads, "parallel replications");
    sim_cmd->add_option("--f0", f0name, "uniform|concave-quadratic");
    sim_cmd->add_option("--out", out, "ledger CSV to append to");
    sim_cmd->add_option("--sample-out", sample_out, "write the seed's generated sample CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (*fit_ic) return run_fit_ic(in, tol, out);
        if (*fit_cs) return run_fit_cs(in, out);
        if (*fit_dc) return run_fit_deconv(in, model, tol, out);
        if (*msle_cmd) return run_msle(in, epsilon, bandwidth, grid, tol, out);
        if (*phi_cmd)
            return run_phi(model, epsilon, functional, f0name, grid,
                           t_set ? std::optional<double>(t) : std::nullopt, out, dump);
        if (*theta_cmd) return run_theta(model, functional, f0name, grid, out);
        if (*var_cmd) return run_variance(model, epsilon, functional, f0name, grid);
        if (*xi_cmd) return run_xi(model, epsilon, t, f0name);
        if (*sim_cmd)
            return run_simulate(model, estimator, epsilon, n, reps, seed, functional,
                                bandwidth, grid, tol, threads, f0name, out, sample_out);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
