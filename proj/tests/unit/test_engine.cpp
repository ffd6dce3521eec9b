#include <doctest.h>

#include <cmath>

#include "mstm/engine.hpp"
#include "mstm/error.hpp"

using namespace mstm;

namespace {

// theta ~ N(0, Sigma), gamma = B theta (deterministic), d = gamma + N(0, s2 I)
MultiscaleProblem linear_gaussian(const Eigen::MatrixXd& B, const Eigen::MatrixXd& Sigma, const Eigen::VectorXd& d,
                                  double s2) {
    MultiscaleProblem p;
    p.name = "linear";
    p.coarse_dim = static_cast<int>(B.rows());
    p.fine_dim = static_cast<int>(B.cols());
    p.prior_mean = Eigen::VectorXd::Zero(p.fine_dim);
    p.prior_cov = Sigma;
    p.upscale = [B](const Eigen::VectorXd& t) { return Eigen::VectorXd(B * t); };
    const int dc = p.coarse_dim;
    p.likelihood.observe = [](const Eigen::VectorXd& g) { return g; };
    p.likelihood.jacobian = [dc](const Eigen::VectorXd&) { return Eigen::MatrixXd::Identity(dc, dc); };
    p.likelihood.data = d;
    p.likelihood.noise_var = s2;
    return p;
}

Eigen::MatrixXd exp_cov(int n, double len) {
    Eigen::MatrixXd S(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) S(i, j) = std::exp(-std::abs(i - j) / len);
    return S;
}

double central_difference(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x, int k, double h) {
    x[k] += h;
    const double up = f(x);
    x[k] -= 2 * h;
    return (up - f(x)) / (2 * h);
}

// argmin over M of (C1 + C2/M)(t_c + M t_f): golden section, no closed form involved
double golden_min_M(double C1, double C2, double tc, double tf) {
    auto cost = [&](double M) { return (C1 + C2 / M) * (tc + M * tf); };
    double a = 1e-6, b = 1e6;
    const double g = (std::sqrt(5.0) - 1) / 2;
    for (int it = 0; it < 300; ++it) {
        const double c = b - g * (b - a), d = a + g * (b - a);
        (cost(c) < cost(d) ? b : a) = (cost(c) < cost(d) ? d : c);
    }
    return 0.5 * (a + b);
}

} // namespace

TEST_CASE("joint prior rows put the coarse block first and match the upscaler") {
    EllipticConfig cfg;
    auto p = make_elliptic1d_problem(cfg);
    const Eigen::MatrixXd joint = generate_joint_prior(p, 6, 3);
    CHECK(joint.cols() == p.coarse_dim + p.fine_dim);
    for (int k = 0; k < 6; ++k) {
        const Eigen::VectorXd theta = joint.row(k).tail(p.fine_dim).transpose();
        CHECK((joint.row(k).head(p.coarse_dim).transpose() - p.upscale(theta)).norm() == 0.0);
    }
    const Eigen::MatrixXd one = generate_joint_prior(p, 1, 3);
    CHECK(one.rows() == 1);
    CHECK(one.cols() == 110);
    CHECK_THROWS_AS(generate_joint_prior(p, 0, 3), Error);
    // same seed, different thread counts: identical rows
    CHECK((generate_joint_prior(p, 20, 9, 1) - generate_joint_prior(p, 20, 9, 3)).norm() == 0.0);
}

TEST_CASE("toy upscaler noise has the declared mean and variance") {
    auto p = make_toy_problem(0.5);
    const Eigen::MatrixXd joint = generate_joint_prior(p, 40000, 4);
    Eigen::VectorXd eta(joint.rows());
    for (Eigen::Index k = 0; k < joint.rows(); ++k) eta[k] = joint(k, 0) - ToyModel::harmonic(joint(k, 1), joint(k, 2));
    const double m = eta.mean();
    const double v = (eta.array() - m).square().sum() / (eta.size() - 1);
    CHECK(std::abs(m + 0.3) <= 5 * std::sqrt(1.5e-3 / 40000));
    CHECK(v == doctest::Approx(1.5e-3).epsilon(0.03));
}

TEST_CASE("Gauss-Hermite rule integrates normal moments") {
    const auto [x, w] = gauss_hermite_normal(12);
    CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-13));
    CHECK((w.array() * x.array().square()).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((w.array() * x.array().pow(4)).sum() == doctest::Approx(3.0).epsilon(1e-12));
    CHECK((w.array() * x.array().pow(10)).sum() == doctest::Approx(945.0).epsilon(1e-10));
}

TEST_CASE("toy exact posterior: quadrature agrees with brute-force gamma integration") {
    // integrate the gamma density on a fine uniform grid instead of Gauss-Hermite
    const double d = 0.5;
    for (auto [t1, t2] : {std::pair{0.3, -0.2}, std::pair{1.5, 1.1}, std::pair{-1.0, 2.0}}) {
        const double m = ToyModel::harmonic(t1, t2) + ToyModel::fine_noise_mean;
        const double s = std::sqrt(ToyModel::fine_noise_var);
        double acc = 0.0;
        const int n = 20001;
        const double lo = m - 10 * s, h = 20 * s / (n - 1);
        for (int i = 0; i < n; ++i) {
            const double g = lo + i * h;
            const double r = d - std::atan(g);
            acc += std::exp(-0.5 * std::pow((g - m) / s, 2)) / (std::sqrt(2 * M_PI) * s) *
                   std::exp(-r * r / (2 * ToyModel::coarse_noise_var)) * h;
        }
        const double oracle = -0.5 * (t1 * t1 + t2 * t2) + std::log(acc);
        CHECK(ToyModel::exact_log_posterior(t1, t2, d) == doctest::Approx(oracle).epsilon(1e-9));
    }
}

TEST_CASE("coarse posterior with uninformative data is the standard normal") {
    auto p = make_toy_problem(0.5);
    p.likelihood.noise_var = std::numeric_limits<double>::infinity();
    auto map = std::make_shared<TriangularCoarseMap>(TriangularMap::identity(1), TriangularMap::identity(1));
    const TargetDensity t = coarse_posterior(p.likelihood, map);
    for (double r : {-2.0, 0.0, 0.7, 3.1}) {
        const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, r);
        CHECK(t.logpdf(x) == -0.5 * r * r - 0.5 * std::log(2 * M_PI));
        Eigen::VectorXd g;
        t.logpdf_grad(x, g);
        CHECK(g[0] == -r);
    }
}

TEST_CASE("coarse posterior gradient matches central differences") {
    SUBCASE("toy problem through a built cubic map") {
        auto p = make_toy_problem(0.5);
        const Eigen::MatrixXd joint = generate_joint_prior(p, 20000, 5);
        MapConfig mc;
        mc.fine = "joint";
        const MapBundle maps = build_maps(p, joint, mc);
        const TargetDensity t = coarse_posterior(p.likelihood, maps.coarse);
        for (double r : {-1.3, 0.2, 1.4}) {
            const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, r);
            Eigen::VectorXd g;
            t.logpdf_grad(x, g);
            const double fd = central_difference(t.logpdf, x, 0, 1e-5);
            CHECK(std::abs(g[0] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
    SUBCASE("1D elliptic problem, adjoint likelihood gradient") {
        EllipticConfig cfg;
        auto p = make_elliptic1d_problem(cfg);
        p.likelihood.noise_var = 1e-2; // keep the scale of the log density moderate
        auto map = std::make_shared<TriangularCoarseMap>(TriangularMap::identity(10), TriangularMap::identity(10));
        const TargetDensity t = coarse_posterior(p.likelihood, map);
        Eigen::VectorXd x(10);
        for (int k = 0; k < 10; ++k) x[k] = 0.3 * std::sin(1.7 * k);
        Eigen::VectorXd g;
        t.logpdf_grad(x, g);
        for (int k = 0; k < 10; ++k) {
            const double fd = central_difference(t.logpdf, x, k, 1e-5);
            CHECK(std::abs(g[k] - fd) <= 1e-5 * std::max(1.0, g.norm()));
        }
    }
}

TEST_CASE("full-dimensional posterior gradient matches central differences") {
    EllipticConfig cfg;
    auto p = make_elliptic1d_problem(cfg);
    const TargetDensity t = full_posterior(p);
    const Eigen::VectorXd x = p.truth;
    Eigen::VectorXd g;
    const double v = t.logpdf_grad(x, g);
    CHECK(v == doctest::Approx(t.logpdf(x)).epsilon(1e-12));
    for (int k : {0, 17, 55, 99}) {
        const double fd = central_difference(t.logpdf, x, k, 1e-5);
        CHECK(std::abs(g[k] - fd) <= 1e-5 * std::max(1.0, g.norm()));
    }
    CHECK_THROWS_AS(full_posterior(make_toy_problem(0.5)), Error);
}

TEST_CASE("identity coarse map recovers the conjugate Gaussian posterior by MCMC") {
    Eigen::MatrixXd A(2, 2);
    A << 1.0, 0.4, -0.3, 0.8;
    const double s2 = 0.25;
    const Eigen::Vector2d d(1.2, -0.5);
    CoarseLikelihood lik;
    lik.observe = [A](const Eigen::VectorXd& g) { return Eigen::VectorXd(A * g); };
    lik.jacobian = [A](const Eigen::VectorXd&) { return A; };
    lik.data = d;
    lik.noise_var = s2;
    const Eigen::Matrix2d cov = (Eigen::Matrix2d::Identity() + A.transpose() * A / s2).inverse();
    const Eigen::Vector2d mean = cov * A.transpose() * d / s2;

    auto map = std::make_shared<TriangularCoarseMap>(TriangularMap::identity(2), TriangularMap::identity(2));
    const TargetDensity t = coarse_posterior(lik, map);
    SamplerSettings s;
    s.steps = 200000;
    const ChainResult r = run_chain_from_map(
        t, s, 11, [&](const Eigen::VectorXd& x) { return coarse_posterior_gn_hessian(lik, *map, x); },
        Eigen::VectorXd::Zero(2));
    const Eigen::RowVector2d m = r.samples.colwise().mean();
    const Eigen::MatrixXd c = r.samples.rowwise() - m;
    const Eigen::Matrix2d emp = c.transpose() * c / double(r.samples.rows() - 1);
    for (int k = 0; k < 2; ++k) {
        CHECK(std::abs(m[k] - mean[k]) <= 0.03 * std::max(std::abs(mean[k]), std::sqrt(cov(k, k))));
        CHECK(emp(k, k) == doctest::Approx(cov(k, k)).epsilon(0.03));
    }
}

TEST_CASE("prolongation shapes, provenance and degenerate maps") {
    LinearConditionalMap lin;
    lin.mean = Eigen::Vector3d(0.5, -1.0, 2.0);
    lin.gain = Eigen::MatrixXd::Zero(3, 2);
    lin.noise_factor = Eigen::MatrixXd::Zero(3, 3);
    Eigen::MatrixXd rc(10, 2);
    for (int i = 0; i < 10; ++i) rc.row(i) << i, -0.5 * i;

    const Eigen::MatrixXd flat = prolong(rc, lin, 3, 1);
    CHECK(flat.rows() == 30);
    for (Eigen::Index r = 0; r < flat.rows(); ++r) CHECK((flat.row(r).transpose() - lin.mean).norm() == 0.0);

    // a fine map that ignores r_f exposes which coarse row produced each fine row
    lin.gain << 1, 0, 0, 1, 1, 1;
    const Eigen::MatrixXd tagged = prolong(rc, lin, 3, 1);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 3; ++j) {
            const Eigen::VectorXd expect = lin.mean + lin.gain * rc.row(i).transpose();
            CHECK((tagged.row(i * 3 + j).transpose() - expect).norm() < 1e-14);
        }
    CHECK_THROWS_AS(prolong(rc, lin, 0, 1), Error);
    CHECK_THROWS_AS(prolong(Eigen::MatrixXd::Zero(4, 3), lin, 1, 1), Error);
}

TEST_CASE("jointly Gaussian problem: pipeline reproduces the analytic posterior mean") {
    Eigen::MatrixXd B(2, 4);
    B << 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5;
    const Eigen::MatrixXd S = exp_cov(4, 2.0);
    const Eigen::Vector2d d(1.0, -0.8);
    const double s2 = 0.01;
    const auto p = linear_gaussian(B, S, d, s2);
    const Eigen::MatrixXd post_cov = (S.inverse() + B.transpose() * B / s2).inverse();
    const Eigen::VectorXd post_mean = post_cov * B.transpose() * d / s2;

    PipelineOptions o;
    o.K = 20000;
    o.maps.coarse_degree = 1;
    o.sampler.steps = 40000;
    o.M = 2;
    o.seed = 21;
    const PosteriorEnsemble e = run_pipeline(p, o);
    CHECK(e.fine.rows() == 80000);
    CHECK(e.coarse_reference.rows() == 40000);
    const Eigen::VectorXd m = e.fine.colwise().mean().transpose();
    CHECK((m - post_mean).norm() <= 0.02 * post_mean.norm());
    // conditional covariance check: total posterior variance per coordinate within 5%
    const Eigen::MatrixXd c = e.fine.rowwise() - m.transpose();
    const Eigen::VectorXd var = c.array().square().colwise().sum() / double(e.fine.rows() - 1);
    for (int k = 0; k < 4; ++k) CHECK(var[k] == doctest::Approx(post_cov(k, k)).epsilon(0.05));
    CHECK(e.timings.t_c > 0.0);
    CHECK(e.timings.t_f > 0.0);
    CHECK(e.provenance().at("M") == 2);
}

TEST_CASE("pipeline validates options before doing any work") {
    auto p = make_toy_problem(0.5);
    int calls = 0;
    auto inner = p.upscale;
    p.upscale = [&](const Eigen::VectorXd& t) {
        ++calls;
        return inner(t);
    };
    PipelineOptions o;
    o.sampler.steps = 0;
    CHECK_THROWS_AS(run_pipeline(p, o), Error);
    o.sampler.steps = 10;
    o.M = 0;
    CHECK_THROWS_AS(run_pipeline(p, o), Error);
    CHECK(calls == 0);
}

TEST_CASE("pipeline errors name the failing stage") {
    auto p = make_toy_problem(0.5);
    PipelineOptions o;
    o.K = 5; // fewer samples than basis functions
    o.maps.fine = "joint";
    try {
        run_pipeline(p, o);
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("map construction") != std::string::npos);
    }
}

TEST_CASE("map bundles survive a save/load round trip") {
    auto p = make_toy_problem(0.5);
    const Eigen::MatrixXd joint = generate_joint_prior(p, 5000, 2);
    const auto dir = std::filesystem::temp_directory_path() / "mstm_bundle_test";
    for (const char* fine : {"joint", "cross_covariance"}) {
        MapConfig mc;
        mc.fine = fine;
        const MapBundle b = build_maps(p, joint, mc);
        b.save(dir);
        const MapBundle c = MapBundle::load(dir);
        const Eigen::VectorXd rc = Eigen::VectorXd::Constant(1, 0.4);
        const Eigen::Vector2d rf(-0.3, 1.1);
        CHECK((b.fine_sample(rc, rf) - c.fine_sample(rc, rf)).norm() == 0.0);
        CHECK((b.coarse->to_coarse(rc) - c.coarse->to_coarse(rc)).norm() == 0.0);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("optimal allocation") {
    SUBCASE("figure setting") {
        const Allocation a = optimal_allocation({1.0, 0.7, 10.0, 0.2, 100.0});
        CHECK(std::abs(a.M_raw - 5.9161) <= 1e-3);
        CHECK(std::abs(a.M_raw - golden_min_M(1.0, 0.7, 10.0, 0.2)) < 1e-6);
        CHECK(a.M == 6);
    }
    SUBCASE("timings recovered from two reported runs") {
        // t_on = N t_c + N M t_f for (N, M) = (5e5, 1) and (5e5, 5)
        Eigen::Matrix2d A;
        A << 5e5, 5e5 * 1, 5e5, 5e5 * 5;
        const Eigen::Vector2d t = A.lu().solve(Eigen::Vector2d(287.31, 314.17));
        const Allocation a = optimal_allocation({22.7867, 10.2019, t[0], t[1], 300.0});
        CHECK(a.M == 4);
        CHECK(std::abs(a.M_raw - golden_min_M(22.7867, 10.2019, t[0], t[1])) < 1e-6);
    }
    SUBCASE("M* does not depend on the budget; N* meets it") {
        const BudgetModel b{3.0, 1.5, 0.02, 0.004, 50.0};
        BudgetModel b2 = b;
        b2.t_tot *= 2;
        const Allocation a = optimal_allocation(b), a2 = optimal_allocation(b2);
        CHECK(a.M_raw == a2.M_raw);
        CHECK(a.N * (b.t_c + a.M_raw * b.t_f) == doctest::Approx(b.t_tot).epsilon(1e-8));
        CHECK(a2.N == doctest::Approx(2 * a.N).epsilon(1e-12));
    }
    SUBCASE("degenerate and invalid budgets") {
        CHECK_THROWS_AS(optimal_allocation({1.0, 2.0, 0.4, 0.2, 10.0}), Error);
        try {
            optimal_allocation({1.0, 2.0, 0.4, 0.2, 10.0});
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::DegenerateBudget);
        }
        CHECK_THROWS_AS(optimal_allocation({-1.0, 2.0, 0.4, 0.2, 10.0}), Error);
    }
}

TEST_CASE("variance constants from replicated runs") {
    std::vector<VarianceMeasurement> ms;
    for (double N : {1e3, 1e4})
        for (double M : {1.0, 5.0}) ms.push_back({N, M, 2.0 / N + 1.0 / (N * M)});
    const VarianceFit f = estimate_variance_constants(ms);
    CHECK(std::abs(f.C1 - 2.0) < 1e-10);
    CHECK(std::abs(f.C2 - 1.0) < 1e-10);
    CHECK(f.r_squared == doctest::Approx(1.0));
    CHECK_FALSE(f.clipped);

    try {
        estimate_variance_constants({{1e3, 1.0, 0.1}});
        FAIL("expected SingularFit");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SingularFit);
    }
    // same M everywhere: the two regressors are proportional
    CHECK_THROWS_AS(estimate_variance_constants({{1e3, 2.0, 0.1}, {1e4, 2.0, 0.01}}), Error);

    // data implying a negative C2 are clipped
    const VarianceFit g = estimate_variance_constants({{1e3, 1.0, 1e-3}, {1e3, 5.0, 1.5e-3}, {1e4, 1.0, 1e-4}});
    CHECK(g.clipped);
    CHECK(g.C2 == 0.0);
    CHECK(g.C1 > 0.0);
}

TEST_CASE("elliptic problems: deterministic synthetic data") {
    EllipticConfig cfg;
    const auto a = make_elliptic1d_problem(cfg);
    const auto b = make_elliptic1d_problem(cfg);
    CHECK(a.likelihood.data.size() == 9);
    CHECK((a.likelihood.data - b.likelihood.data).norm() == 0.0);
    CHECK((a.truth - b.truth).norm() == 0.0);
    cfg.truth_seed = 8;
    CHECK((make_elliptic1d_problem(cfg).likelihood.data - a.likelihood.data).norm() > 0.0);
}

TEST_CASE("config parsing rejects bad values") {
    CHECK_THROWS_AS(nlohmann::json({{"coarse", "spline"}}).get<MapConfig>(), Error);
    CHECK_THROWS_AS(nlohmann::json({{"kind", "hmc"}}).get<SamplerSettings>(), Error);
    CHECK_THROWS_AS(nlohmann::json({{"K", 0}}).get<PipelineOptions>(), Error);
    const auto o = nlohmann::json({{"K", 50}, {"M", 3}, {"sampler", {{"steps", 77}}}}).get<PipelineOptions>();
    CHECK(o.K == 50);
    CHECK(o.M == 3);
    CHECK(o.sampler.steps == 77);
    const nlohmann::json round = o;
    CHECK(round.get<PipelineOptions>().sampler.steps == 77);
}
