// mstm: desk-scale driver for multiscale transport-map inference.
//
//   mstm toy          KL convergence of the two-parameter toy problem
//   mstm elliptic1d   1D pressure problem vs a full-dimensional benchmark chain
//   mstm elliptic2d   2D problem with the stationary coarse map
//   mstm build-maps | sample-coarse | prolong   the pipeline in separate steps
//   mstm diagnose     quantiles / ESS / KDE of a stored sample matrix
//
// Exit codes: 0 ok, 2 configuration or I/O problem, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "mstm/diagnostics.hpp"
#include "mstm/engine.hpp"
#include "mstm/error.hpp"
#include "mstm/experiments.hpp"
#include "mstm/io.hpp"
#include "mstm/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mstm;

namespace {

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

const std::vector<double> kLevels{0.05, 0.25, 0.5, 0.75, 0.95};

struct Globals {
    std::string config;
    std::string out = "run";
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

json load_config(const Globals& g) {
    if (g.config.empty()) return json::object();
    json j = read_json(g.config);
    require(j.is_object(), ErrorCode::Config, g.config + ": top level must be an object");
    return j;
}

template <class T>
T block_or_default(const json& cfg, const char* key, T value = T{}) {
    if (!cfg.contains(key)) return value;
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, std::string("config block '") + key + "': " + e.what());
    }
}

void log(const char* fmt, auto... args) {
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

fs::path prepare_out(const Globals& g) {
    std::error_code ec;
    fs::create_directories(g.out, ec);
    require(!ec, ErrorCode::Io, "cannot create output directory " + g.out + ": " + ec.message());
    return g.out;
}

json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(m.cols());
        for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] = m(i, j);
        rows.push_back(r);
    }
    return rows;
}

void save_samples(RunManifest& man, const std::string& name, const Eigen::MatrixXd& m, const std::string& prefix,
                  std::uint64_t seed) {
    write_sample_matrix(man.path(name), m, numbered_names(prefix, m.cols()), seed);
    man.add(name + ".bin");
    man.add(name + ".json");
}

void save_csv(RunManifest& man, const std::string& name, const Eigen::MatrixXd& m,
              const std::vector<std::string>& header = {}) {
    write_csv(man.path(name), m, header);
    man.add(name);
}

void save_json(RunManifest& man, const std::string& name, const json& j) {
    write_json(man.path(name), j);
    man.add(name);
}

json problem_block(const json& cfg, const char* fallback_type) {
    json p = cfg.value("problem", json::object());
    if (!p.contains("type")) p["type"] = fallback_type;
    return p;
}

// ------------------------------------------------------------------ toy

int cmd_toy(const Globals& g) {
    const json cfg = load_config(g);
    ToyStudyConfig tc = block_or_default<ToyStudyConfig>(json{{"toy", cfg}}, "toy");
    tc.validate();
    const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{1}));
    RunManifest man(prepare_out(g), "toy", json(tc), seed, g.threads);

    const auto problem = make_toy_problem(tc.observed);
    std::vector<ToyReplicate> runs;
    Eigen::MatrixXd table(tc.degrees.size() * tc.replicates, 4);
    for (std::size_t di = 0; di < tc.degrees.size(); ++di) {
        const int p = tc.degrees[di];
        for (int r = 0; r < tc.replicates; ++r) {
            ToyReplicate rep{p, r, Rng(seed, std::uint64_t(p) * 1000 + r).engine()()};
            auto opts = toy_pipeline_options(tc, p, rep.seed);
            opts.threads = g.threads;
            const auto t0 = Clock::now();
            const auto ens = run_pipeline(problem, opts);
            rep.kl = toy_kl(tc, ens.fine);
            rep.seconds = seconds_since(t0);
            log("toy degree %d replicate %d: KL %.4g (%.1fs)", p, r, rep.kl, rep.seconds);
            table.row(di * tc.replicates + r) << p, r, rep.kl, rep.seconds;
            if (r == 0) {
                const std::string tag = "degree" + std::to_string(p);
                save_samples(man, "samples_" + tag, ens.fine, "theta", rep.seed);
                const Eigen::VectorXd grid = linspace(tc.lo, tc.hi, tc.grid);
                save_csv(man, "kde_" + tag + ".csv", kde_2d(ens.fine, grid, grid));
            }
            runs.push_back(rep);
        }
    }
    save_csv(man, "kl_replicates.csv", table, {"degree", "replicate", "kl", "seconds"});

    const Eigen::VectorXd grid = linspace(tc.lo, tc.hi, tc.grid);
    save_csv(man, "exact_log_posterior.csv", ToyModel::exact_log_posterior_grid(grid, grid, tc.observed));
    save_csv(man, "grid.csv", grid, {"x"});

    json summary = json::array();
    const auto s = summarize_kl(runs, tc.degrees);
    for (const auto& k : s) {
        summary.push_back({{"degree", k.degree}, {"mean_kl", k.mean}, {"std_error", k.std_error}});
        log("degree %d: mean KL %.4g +- %.2g", k.degree, k.mean, k.std_error);
    }
    save_json(man, "summary.json", {{"kl", summary}, {"monotone_within_se", kl_monotone_within_se(s)}});
    man.write();
    return 0;
}

// ------------------------------------------------------------ elliptic 1D

json chain_row(const char* name, const ChainResult& c, double online_seconds) {
    return {{"method", name},
            {"acceptance", c.acceptance_rate},
            {"ess_min", c.ess_min},
            {"ess_max", c.ess_max},
            {"online_seconds", online_seconds},
            {"ess_min_per_second", c.ess_min / online_seconds},
            {"ess_max_per_second", c.ess_max / online_seconds}};
}

int cmd_elliptic1d(const Globals& g) {
    const json cfg = load_config(g);
    const json pspec = problem_block(cfg, "elliptic1d");
    auto opts = block_or_default<PipelineOptions>(cfg, "pipeline");
    if (g.seed) opts.seed = *g.seed;
    opts.threads = g.threads;
    opts.validate();
    const json bench = cfg.value("benchmark", json{{"steps", 500000}, {"seed", 99}});
    const std::vector<int> cells = cfg.value("cells", std::vector<int>{10, 30, 50, 90});
    json echo = cfg;
    echo["problem"] = pspec;
    echo["pipeline"] = opts;
    RunManifest man(prepare_out(g), "elliptic1d", echo, opts.seed, g.threads);

    const auto problem = make_problem(pspec, g.threads);
    save_samples(man, "truth", problem.truth.transpose(), "theta", 0);
    save_samples(man, "data", problem.likelihood.data.transpose(), "d", 0);

    MapBundle maps;
    const auto ens = run_pipeline(problem, opts, &maps);
    log("multiscale: maps %.1fs, chain %.1fs, acceptance %.2f", ens.timings.maps, ens.timings.coarse_mcmc,
        ens.chain.acceptance_rate);
    save_samples(man, "posterior_fine", ens.fine, "theta", opts.seed);
    save_samples(man, "posterior_coarse", ens.coarse, "gamma", opts.seed);
    save_csv(man, "quantiles_multiscale.csv", quantiles(ens.fine, kLevels));

    json report{{"pipeline", ens.provenance()}};
    json table = json::array({chain_row("multiscale", ens.chain, ens.timings.coarse_mcmc + ens.timings.prolong)});

    const int bench_steps = bench.value("steps", 0);
    if (bench_steps > 0) {
        SamplerSettings s = opts.sampler;
        s.steps = bench_steps;
        const auto t0 = Clock::now();
        const auto chain = run_chain_from_map(
            full_posterior(problem), s, bench.value("seed", std::uint64_t{99}),
            [&](const Eigen::VectorXd& th) { return full_posterior_gn_hessian(problem, th); }, problem.prior_mean);
        const double secs = seconds_since(t0);
        log("benchmark: %d steps in %.1fs, acceptance %.2f", bench_steps, secs, chain.acceptance_rate);
        save_csv(man, "quantiles_benchmark.csv", quantiles(chain.samples, kLevels));
        table.push_back(chain_row("full_dram", chain, secs));

        const Eigen::MatrixXd bias = quantile_bias(ens.fine, chain.samples, cells, kLevels);
        json errs = json::array();
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const double x = problem.geometry.cell_center(cells[c])[0];
            json row{{"cell", cells[c]}, {"x", x}};
            for (std::size_t l = 0; l < kLevels.size(); ++l)
                row["E" + std::to_string(int(std::lround(kLevels[l] * 100)))] = bias(l, c);
            errs.push_back(row);
            log("x=%.2f  E05 %.3f  E25 %.3f  E50 %.3f  E75 %.3f  E95 %.3f", x, bias(0, c), bias(1, c), bias(2, c),
                bias(3, c), bias(4, c));
        }
        report["quantile_bias"] = errs;
    }
    report["ess_table"] = table;

    if (cfg.contains("budget")) {
        const json b = cfg.at("budget");
        VarianceStudyConfig vs;
        vs.N = b.value("N", vs.N);
        vs.M = b.value("M", vs.M);
        vs.replicates = b.value("replicates", vs.replicates);
        vs.column = b.value("column", problem.fine_dim / 2);
        const auto meas = run_variance_study(problem, maps, opts.sampler, vs, opts.seed, g.threads);
        const auto fit = estimate_variance_constants(meas);
        BudgetModel bm{fit.C1, fit.C2, ens.timings.t_c, ens.timings.t_f, b.value("t_tot", 600.0)};
        json jb{{"C1", fit.C1}, {"C2", fit.C2}, {"r_squared", fit.r_squared}, {"clipped", fit.clipped},
                {"t_c", bm.t_c}, {"t_f", bm.t_f}};
        try {
            const auto a = optimal_allocation(bm);
            jb["N_star"] = a.N;
            jb["M_star_raw"] = a.M_raw;
            jb["M_star"] = a.M;
            log("budget: C1 %.4g C2 %.4g -> M* %.3f (M = %d)", fit.C1, fit.C2, a.M_raw, a.M);
        } catch (const Error& e) {
            jb["allocation_error"] = e.what();
            log("budget: no allocation (%s)", e.what());
        }
        json mj = json::array();
        for (const auto& m : meas) mj.push_back({{"N", m.N}, {"M", m.M}, {"variance", m.variance}});
        jb["measurements"] = mj;
        report["budget"] = jb;
    }
    save_json(man, "report.json", report);
    man.write();
    return 0;
}

// ------------------------------------------------------------ elliptic 2D

int cmd_elliptic2d(const Globals& g) {
    const json cfg = load_config(g);
    json pspec = problem_block(cfg, "elliptic2d");
    for (auto [k, v] : {std::pair{"coarse", 4}, std::pair{"fine_per_coarse", 7}})
        if (!pspec.contains(k)) pspec[k] = v;
    if (!pspec.contains("noise_var")) pspec["noise_var"] = 1e-6;
    PipelineOptions defaults;
    defaults.maps.coarse = "stationary";
    defaults.maps.coarse_degree = 7;
    defaults.maps.fine = "cross_covariance";
    auto opts = defaults;
    if (cfg.contains("pipeline")) {
        json merged = json(defaults);
        merged.merge_patch(cfg.at("pipeline"));
        opts = block_or_default<PipelineOptions>(json{{"p", merged}}, "p");
    }
    if (g.seed) opts.seed = *g.seed;
    opts.threads = g.threads;
    opts.validate();
    const int realizations = cfg.value("realizations", 5);
    const int fidelity = cfg.value("fidelity_samples", 20000);
    const int kde_points = cfg.value("kde_grid", 41);
    json echo = cfg;
    echo["problem"] = pspec;
    echo["pipeline"] = opts;
    RunManifest man(prepare_out(g), "elliptic2d", echo, opts.seed, g.threads);

    const auto problem = make_problem(pspec, g.threads);
    const auto& geom = problem.geometry;
    const auto model = std::dynamic_pointer_cast<const CoarseModel2D>(problem.coarse_model);
    require(model != nullptr, ErrorCode::Config, "elliptic2d needs a 2D problem block");
    log("reduced basis: sigma7/sigma1 = %.3e", model->basis().rank_ratio);

    const auto t0 = Clock::now();
    const Eigen::MatrixXd joint = generate_joint_prior(problem, opts.K, stage_seed(opts.seed, Stage::Prior), g.threads);
    MapBuildReport rep;
    const MapBundle maps = build_maps(problem, joint, opts.maps, g.threads, &rep);
    log("prior + maps: %.1fs", seconds_since(t0));
    maps.save(man.path("maps"));
    for (const auto& e : fs::directory_iterator(man.path("maps"))) man.add("maps/" + e.path().filename().string());

    // coarse-map fidelity: prior blocks vs blocks induced by the map
    const Eigen::MatrixXd prior_gamma = joint.leftCols(problem.coarse_dim);
    const Eigen::MatrixXd map_gamma = sample_coarse_map(*maps.coarse, fidelity, Rng(opts.seed, 11).engine()());
    const auto err = block_moment_error(prior_gamma, map_gamma, 6);
    log("coarse-map fidelity: worst standardized mean %.3f, covariance %.3f", err.mean, err.covariance);
    {
        // pairwise densities of element 0, long format
        std::vector<std::string> hdr{"i", "j", "source", "x", "y", "density"};
        std::vector<Eigen::RowVectorXd> rows;
        for (int i = 0; i < 6; ++i)
            for (int j = i + 1; j < 6; ++j) {
                Eigen::MatrixXd ref(prior_gamma.rows(), 2), ind(map_gamma.rows(), 2);
                ref << prior_gamma.col(i), prior_gamma.col(j);
                ind << map_gamma.col(i), map_gamma.col(j);
                const Eigen::VectorXd gx = quantiles(ref.col(0), {0.005, 0.995}).col(0);
                const Eigen::VectorXd gy = quantiles(ref.col(1), {0.005, 0.995}).col(0);
                const Eigen::VectorXd ax = linspace(gx[0], gx[1], kde_points), ay = linspace(gy[0], gy[1], kde_points);
                for (int src = 0; src < 2; ++src) {
                    const Eigen::MatrixXd dens = kde_2d(src == 0 ? ref : ind, ax, ay);
                    for (int a = 0; a < kde_points; ++a)
                        for (int b = 0; b < kde_points; ++b) {
                            Eigen::RowVectorXd r(6);
                            r << i, j, src, ax[a], ay[b], dens(a, b);
                            rows.push_back(r);
                        }
                }
            }
        Eigen::MatrixXd m(rows.size(), 6);
        for (std::size_t k = 0; k < rows.size(); ++k) m.row(k) = rows[k];
        save_csv(man, "coarse_density_element0.csv", m, hdr);
    }

    const auto ens = run_posterior(problem, maps, opts);
    log("posterior: chain %.1fs, acceptance %.2f, prolongation %.1fs", ens.timings.coarse_mcmc,
        ens.chain.acceptance_rate, ens.timings.prolong);
    save_samples(man, "posterior_coarse", ens.coarse, "gamma", opts.seed);

    const Eigen::MatrixXd grid_fine = to_grid_order(ens.fine, geom);
    const int nx = geom.fine_x(), ny = geom.fine_y();
    auto as_grid = [&](const Eigen::RowVectorXd& v) { return Eigen::MatrixXd(v.reshaped<Eigen::RowMajor>(ny, nx)); };
    const Eigen::RowVectorXd mean = grid_fine.colwise().mean();
    const Eigen::RowVectorXd var = (grid_fine.rowwise() - mean).colwise().squaredNorm() / double(grid_fine.rows() - 1);
    save_csv(man, "posterior_mean.csv", as_grid(mean));
    save_csv(man, "posterior_variance.csv", as_grid(var));
    save_csv(man, "truth.csv", as_grid(to_grid_order(problem.truth.transpose(), geom).row(0)));
    for (int r = 0; r < std::min<int>(realizations, grid_fine.rows()); ++r) {
        const Eigen::Index row = Eigen::Index(r) * grid_fine.rows() / std::max(realizations, 1);
        save_csv(man, "realization_" + std::to_string(r) + ".csv", as_grid(grid_fine.row(row)));
    }

    Rng prng(opts.seed, 12);
    const Eigen::MatrixXd prior_fields = problem.sample_prior(std::min<int>(2000, opts.K), prng);
    const double vg_post = lag1_variogram(ens.fine, geom), vg_prior = lag1_variogram(prior_fields, geom);
    log("lag-1 semivariogram: posterior %.4f, prior %.4f", vg_post, vg_prior);

    json report{{"pipeline", ens.provenance()},
                {"rank_ratio", model->basis().rank_ratio},
                {"coarse_map_fidelity",
                 {{"worst_standardized_mean", err.mean},
                  {"worst_standardized_covariance", err.covariance},
                  {"worst_mean_element", err.worst_mean_element},
                  {"worst_covariance_element", err.worst_cov_element},
                  {"samples", fidelity}}},
                {"variogram", {{"posterior", vg_post}, {"prior", vg_prior}, {"ratio", vg_post / vg_prior}}},
                {"ess_table", json::array({chain_row("multiscale", ens.chain,
                                                     ens.timings.coarse_mcmc + ens.timings.prolong)})}};
    save_json(man, "report.json", report);
    man.write();
    return 0;
}

// ------------------------------------------------------- pipeline pieces

int cmd_build_maps(const Globals& g) {
    const json cfg = load_config(g);
    const json pspec = problem_block(cfg, "toy");
    const auto mc = block_or_default<MapConfig>(cfg, "maps");
    mc.validate();
    const int K = cfg.value("K", 10000);
    require(K >= 2, ErrorCode::Config, "K must be >= 2");
    const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{1}));
    json echo = cfg;
    echo["problem"] = pspec;
    echo["maps"] = mc;
    echo["K"] = K;
    RunManifest man(prepare_out(g), "build-maps", echo, seed, g.threads);

    const auto problem = make_problem(pspec, g.threads);
    const Eigen::MatrixXd joint = generate_joint_prior(problem, K, stage_seed(seed, Stage::Prior), g.threads);
    MapBuildReport rep;
    const auto maps = build_maps(problem, joint, mc, g.threads, &rep);
    log("maps built in %.1fs", rep.seconds);
    save_samples(man, "joint_prior", joint, "x", seed);
    maps.save(man.path("maps"));
    for (const auto& e : fs::directory_iterator(man.path("maps"))) man.add("maps/" + e.path().filename().string());
    auto diag_json = [](const std::vector<ComponentDiagnostics>& v) {
        json a = json::array();
        for (const auto& d : v)
            a.push_back({{"outer_iterations", d.outer_iterations},
                         {"newton_iterations", d.newton_iterations},
                         {"kkt_residual", d.kkt_residual},
                         {"sample_mean", d.sample_mean},
                         {"sample_variance", d.sample_variance},
                         {"min_diagonal", d.min_diagonal}});
        return a;
    };
    const json diag = diag_json(rep.coarse_diagnostics), fdiag = diag_json(rep.fine_diagnostics);
    save_json(man, "build_report.json", {{"seconds", rep.seconds}, {"coarse", diag}, {"fine", fdiag}});
    man.write();
    return 0;
}

int cmd_sample_coarse(const Globals& g, const std::string& maps_dir) {
    const json cfg = load_config(g);
    const json pspec = problem_block(cfg, "toy");
    auto s = block_or_default<SamplerSettings>(cfg, "sampler");
    s.validate();
    const std::uint64_t seed = g.seed.value_or(cfg.value("seed", std::uint64_t{1}));
    json echo = cfg;
    echo["problem"] = pspec;
    echo["sampler"] = s;
    echo["maps"] = fs::absolute(maps_dir).string();
    RunManifest man(prepare_out(g), "sample-coarse", echo, seed, g.threads);

    const auto problem = make_problem(pspec, g.threads);
    const auto maps = MapBundle::load(maps_dir);
    const auto r = sample_coarse(problem, maps, s, seed);
    log("coarse chain: acceptance %.2f, ESS %.0f..%.0f", r.chain.acceptance_rate, r.chain.ess_min, r.chain.ess_max);
    save_samples(man, "coarse_reference", r.chain.samples, "r", seed);
    save_samples(man, "coarse", r.coarse, "gamma", seed);
    save_json(man, "chain.json", {{"chain", r.chain}, {"map_point", std::vector<double>(r.map_point.begin(), r.map_point.end())}});
    man.write();
    return 0;
}

int cmd_prolong(const Globals& g, const std::string& maps_dir, const std::string& coarse, int M) {
    require(M >= 1, ErrorCode::Config, "M must be >= 1");
    const std::uint64_t seed = g.seed.value_or(1);
    json echo{{"maps", fs::absolute(maps_dir).string()}, {"coarse_reference", fs::absolute(coarse).string()}, {"M", M}};
    RunManifest man(prepare_out(g), "prolong", echo, seed, g.threads);
    const auto maps = MapBundle::load(maps_dir);
    const Eigen::MatrixXd ref = read_sample_matrix(coarse);
    const auto t0 = Clock::now();
    const Eigen::MatrixXd fine = prolong(ref, maps, M, seed, g.threads);
    log("prolonged %ld coarse samples x %d in %.1fs", long(ref.rows()), M, seconds_since(t0));
    save_samples(man, "fine", fine, "theta", seed);
    man.write();
    return 0;
}

int cmd_diagnose(const Globals& g, const std::string& samples_base, bool ess) {
    const json cfg = load_config(g);
    const std::vector<double> levels = cfg.value("levels", kLevels);
    RunManifest man(prepare_out(g), "diagnose", json{{"samples", fs::absolute(samples_base).string()}, {"config", cfg}},
                    0, g.threads);
    SampleMatrixHeader hdr;
    const Eigen::MatrixXd x = read_sample_matrix(samples_base, &hdr);
    require(x.rows() >= 1, ErrorCode::EmptySampleSet, "sample matrix is empty");
    save_csv(man, "quantiles.csv", quantiles(x, levels), hdr.column_names);
    json report{{"rows", x.rows()}, {"cols", x.cols()}, {"levels", levels}};
    const Eigen::RowVectorXd mean = x.colwise().mean();
    report["mean"] = matrix_json(mean);
    report["variance"] = matrix_json(column_variance(x));
    if (ess) {
        const Eigen::VectorXd e = ess_autocorrelation(x);
        report["ess"] = matrix_json(e.transpose());
        log("ESS min %.0f max %.0f of %ld", e.minCoeff(), e.maxCoeff(), long(x.rows()));
    }
    if (cfg.contains("kde")) {
        const json k = cfg.at("kde");
        const std::vector<int> cols = k.value("columns", std::vector<int>{0, 1});
        require(cols.size() == 2 && cols[0] >= 0 && cols[1] >= 0 && cols[0] < x.cols() && cols[1] < x.cols(),
                ErrorCode::Config, "kde.columns must name two existing columns");
        const Eigen::VectorXd grid = linspace(k.value("lo", -1.5), k.value("hi", 2.0), k.value("grid", 141));
        Eigen::MatrixXd pair(x.rows(), 2);
        pair << x.col(cols[0]), x.col(cols[1]);
        save_csv(man, "kde.csv", kde_2d(pair, grid, grid));
        if (k.contains("toy_observed")) {
            const double h = grid[1] - grid[0];
            const double kl = kl_on_grid(ToyModel::exact_log_posterior_grid(grid, grid, k.at("toy_observed")),
                                         kde_2d(pair, grid, grid), h * h);
            report["kl_vs_toy_exact"] = kl;
            log("KL vs exact toy posterior: %.4g", kl);
        }
    }
    save_json(man, "diagnostics.json", report);
    man.write();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multiscale inference with triangular transport maps"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto add_globals = [&](CLI::App* sc) {
        sc->add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
        sc->add_option("--out", g.out, "run directory")->capture_default_str();
        sc->add_option("--seed", seed, "master seed (overrides the config)");
        sc->add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    };
    auto* toy = app.add_subcommand("toy", "toy-problem KL convergence over map degrees");
    auto* e1 = app.add_subcommand("elliptic1d", "1D pressure problem with benchmark comparison");
    auto* e2 = app.add_subcommand("elliptic2d", "2D pressure problem with the stationary coarse map");
    auto* bm = app.add_subcommand("build-maps", "sample the joint prior and build coarse/fine maps");
    auto* sc = app.add_subcommand("sample-coarse", "MCMC on the coarse posterior in reference coordinates");
    auto* pr = app.add_subcommand("prolong", "push coarse reference samples to fine samples");
    auto* dg = app.add_subcommand("diagnose", "quantiles, ESS and KDE of a sample matrix");
    for (auto* s : {toy, e1, e2, bm, sc, pr, dg}) add_globals(s);

    std::string maps_dir, coarse_base, samples_base;
    int M = 1;
    bool ess = false;
    sc->add_option("--maps", maps_dir, "map directory from build-maps")->required()->check(CLI::ExistingDirectory);
    pr->add_option("--maps", maps_dir, "map directory from build-maps")->required()->check(CLI::ExistingDirectory);
    pr->add_option("--coarse", coarse_base, "coarse reference sample matrix (path without extension)")->required();
    pr->add_option("-M,--fine-per-coarse", M, "fine samples per coarse sample")->capture_default_str();
    dg->add_option("--samples", samples_base, "sample matrix (path without extension)")->required();
    dg->add_flag("--ess", ess, "report autocorrelation ESS per column");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    for (auto* s : {toy, e1, e2, bm, sc, pr, dg})
        if (s->count("--seed")) g.seed = seed;

    try {
        if (*toy) return cmd_toy(g);
        if (*e1) return cmd_elliptic1d(g);
        if (*e2) return cmd_elliptic2d(g);
        if (*bm) return cmd_build_maps(g);
        if (*sc) return cmd_sample_coarse(g, maps_dir);
        if (*pr) return cmd_prolong(g, maps_dir, coarse_base, M);
        if (*dg) return cmd_diagnose(g, samples_base, ess);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.is_numerical() ? 3 : 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 2;
}
