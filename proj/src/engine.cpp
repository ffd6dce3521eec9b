#include "mstm/engine.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "mstm/error.hpp"
#include "mstm/io.hpp"
#include "mstm/parallel.hpp"

namespace mstm {

namespace {

using Clock = std::chrono::steady_clock;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error(e.code(), std::string(stage) + ": " + e.what());
    }
}

Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& h) {
    const Eigen::MatrixXd s = 0.5 * (h + h.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::CovarianceNotPD, "Hessian at the MAP is not positive definite");
    Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
    return 0.5 * (inv + inv.transpose());
}

} // namespace

// ------------------------------------------------------------ likelihood

double CoarseLikelihood::log_likelihood(const Eigen::VectorXd& gamma) const {
    if (!std::isfinite(noise_var)) return 0.0;
    if (value_gradient) {
        double v = 0.0;
        value_gradient(gamma, &v);
        return v;
    }
    return -(observe(gamma) - data).squaredNorm() / (2.0 * noise_var);
}

Eigen::VectorXd CoarseLikelihood::gradient(const Eigen::VectorXd& gamma, double* value) const {
    if (!std::isfinite(noise_var)) {
        if (value) *value = 0.0;
        return Eigen::VectorXd::Zero(gamma.size());
    }
    if (value_gradient) return value_gradient(gamma, value);
    const Eigen::VectorXd resid = data - observe(gamma);
    if (value) *value = -resid.squaredNorm() / (2.0 * noise_var);
    return jacobian(gamma).transpose() * resid / noise_var;
}

Eigen::MatrixXd CoarseLikelihood::gauss_newton(const Eigen::VectorXd& gamma) const {
    if (!std::isfinite(noise_var)) return Eigen::MatrixXd::Zero(gamma.size(), gamma.size());
    const Eigen::MatrixXd J = jacobian(gamma);
    return J.transpose() * J / noise_var;
}

// --------------------------------------------------------------- problem

Eigen::MatrixXd MultiscaleProblem::sample_prior(int n, Rng& rng) const {
    if (field_prior) return field_prior->sample(n, rng);
    const Eigen::LLT<Eigen::MatrixXd> llt(prior_cov);
    require(llt.info() == Eigen::Success, ErrorCode::CovarianceNotPD, "prior covariance is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::MatrixXd z(n, fine_dim);
    for (int r = 0; r < n; ++r) z.row(r) = rng.normal_vector(fine_dim).transpose();
    return (z * L.transpose()).rowwise() + prior_mean.transpose();
}

void MultiscaleProblem::validate() const {
    require(coarse_dim > 0 && fine_dim > 0, ErrorCode::Config, "problem dimensions must be positive");
    require(prior_mean.size() == fine_dim && prior_cov.rows() == fine_dim, ErrorCode::DimensionMismatch,
            "prior moments do not match the fine dimension");
    require(static_cast<bool>(upscale), ErrorCode::Config, "problem has no upscaler");
    require(upscale_noise_var >= 0.0, ErrorCode::Config, "upscaler noise variance must be nonnegative");
    require(likelihood.noise_var > 0.0, ErrorCode::Config, "observation noise variance must be positive");
}

// ------------------------------------------------------------------- toy

double ToyModel::harmonic(double t1, double t2) { return 1.0 / (1.0 + std::exp(-t1) + std::exp(-t2)); }

std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite_normal(int n) {
    require(n >= 1, ErrorCode::Config, "quadrature needs at least one node");
    // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite recurrence
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(double(k));
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    Eigen::VectorXd w = es.eigenvectors().row(0).transpose().array().square();
    return {es.eigenvalues(), w / w.sum()};
}

double ToyModel::exact_log_posterior(double t1, double t2, double d, int nodes) {
    static thread_local std::pair<Eigen::VectorXd, Eigen::VectorXd> gh;
    if (gh.first.size() != nodes) gh = gauss_hermite_normal(nodes);
    const double m = harmonic(t1, t2) + fine_noise_mean;
    const double s = std::sqrt(fine_noise_var);
    double peak = kNegInf;
    Eigen::VectorXd terms(nodes);
    for (int k = 0; k < nodes; ++k) {
        const double r = d - std::atan(m + s * gh.first[k]);
        terms[k] = std::log(gh.second[k]) - r * r / (2.0 * coarse_noise_var);
        peak = std::max(peak, terms[k]);
    }
    const double loglik = peak + std::log((terms.array() - peak).exp().sum());
    return -0.5 * (t1 * t1 + t2 * t2) + loglik;
}

Eigen::MatrixXd ToyModel::exact_log_posterior_grid(const Eigen::VectorXd& gx, const Eigen::VectorXd& gy, double d) {
    Eigen::MatrixXd out(gx.size(), gy.size());
    for (Eigen::Index a = 0; a < gx.size(); ++a)
        for (Eigen::Index b = 0; b < gy.size(); ++b) out(a, b) = exact_log_posterior(gx[a], gy[b], d);
    return out;
}

MultiscaleProblem make_toy_problem(double observed) {
    MultiscaleProblem p;
    p.name = "toy";
    p.coarse_dim = 1;
    p.fine_dim = 2;
    p.prior_mean = Eigen::VectorXd::Zero(2);
    p.prior_cov = Eigen::MatrixXd::Identity(2, 2);
    p.upscale = [](const Eigen::VectorXd& t) { return Eigen::VectorXd::Constant(1, ToyModel::harmonic(t[0], t[1])); };
    p.upscale_noise_mean = ToyModel::fine_noise_mean;
    p.upscale_noise_var = ToyModel::fine_noise_var;
    p.likelihood.observe = [](const Eigen::VectorXd& g) { return Eigen::VectorXd(g.array().atan()); };
    p.likelihood.jacobian = [](const Eigen::VectorXd& g) {
        return Eigen::MatrixXd::Constant(1, 1, 1.0 / (1.0 + g[0] * g[0]));
    };
    p.likelihood.data = Eigen::VectorXd::Constant(1, observed);
    p.likelihood.noise_var = ToyModel::coarse_noise_var;
    return p;
}

// -------------------------------------------------------------- elliptic

void to_json(nlohmann::json& j, const EllipticConfig& c) {
    j = nlohmann::json{{"coarse", c.coarse},         {"fine_per_coarse", c.fine_per_coarse},
                       {"sigma2", c.sigma2},         {"length", c.length},
                       {"noise_var", c.noise_var},   {"truth_seed", c.truth_seed},
                       {"basis_pilot", c.basis_pilot}, {"observe", c.observe}};
}

void from_json(const nlohmann::json& j, EllipticConfig& c) {
    c.coarse = j.value("coarse", c.coarse);
    c.fine_per_coarse = j.value("fine_per_coarse", c.fine_per_coarse);
    c.sigma2 = j.value("sigma2", c.sigma2);
    c.length = j.value("length", c.length);
    c.noise_var = j.value("noise_var", c.noise_var);
    c.truth_seed = j.value("truth_seed", c.truth_seed);
    c.basis_pilot = j.value("basis_pilot", c.basis_pilot);
    c.observe = j.value("observe", c.observe);
    require(c.coarse >= 1 && c.fine_per_coarse >= 1, ErrorCode::Config, "grid sizes must be positive");
    require(c.sigma2 > 0.0 && c.length > 0.0 && c.noise_var > 0.0, ErrorCode::Config,
            "sigma2, length and noise_var must be positive");
    require(c.basis_pilot >= 2, ErrorCode::Config, "basis_pilot must be at least 2");
}

namespace {

void attach_model_likelihood(MultiscaleProblem& p, std::shared_ptr<const CoarseModel> model, Eigen::VectorXd data,
                             double noise_var) {
    p.coarse_model = model;
    p.likelihood.observe = [model](const Eigen::VectorXd& g) { return model->observe(g); };
    p.likelihood.jacobian = [model](const Eigen::VectorXd& g) { return model->observation_jacobian(g); };
    p.likelihood.data = data;
    p.likelihood.noise_var = noise_var;
    if (std::isfinite(noise_var)) {
        p.likelihood.value_gradient = [model, data, noise_var](const Eigen::VectorXd& g, double* v) {
            return model->log_likelihood_gradient(g, data, noise_var, v);
        };
    }
}

void fill_field_prior(MultiscaleProblem& p, const EllipticConfig& cfg, const GridGeometry& geom) {
    geom.validate();
    p.geometry = geom;
    auto prior = std::make_shared<const GaussianFieldPrior>(geom, cfg.sigma2, cfg.length);
    p.field_prior = prior;
    p.fine_dim = prior->dim();
    p.prior_mean = prior->mean();
    p.prior_cov = prior->covariance();
}

Eigen::VectorXd noisy(const Eigen::VectorXd& clean, double noise_var, Rng& rng) {
    return clean + std::sqrt(noise_var) * rng.normal_vector(clean.size());
}

} // namespace

MultiscaleProblem make_elliptic1d_problem(const EllipticConfig& cfg) {
    MultiscaleProblem p;
    p.name = "elliptic1d";
    const GridGeometry geom = GridGeometry::line(cfg.coarse, cfg.fine_per_coarse);
    fill_field_prior(p, cfg, geom);
    p.coarse_dim = geom.coarse_count();
    p.upscale = [geom](const Eigen::VectorXd& t) { return upscale_1d(t, geom); };
    p.upscale_jacobian = [geom](const Eigen::VectorXd& t) { return upscale_1d_jacobian(t, geom); };

    auto model = std::make_shared<const CoarseModel1D>(geom, 0.0, 1.0);
    Rng truth_rng(cfg.truth_seed);
    p.truth = p.field_prior->sample_one(truth_rng);
    const Eigen::VectorXd heads = fine_fem_solve_1d(p.truth, geom, 0.0, 1.0);
    Eigen::VectorXd clean(model->observation_count());
    for (int k = 0; k < model->observation_count(); ++k)
        clean[k] = heads[model->observed_nodes()[static_cast<std::size_t>(k)] * geom.fine_per_coarse];
    Rng noise_rng(cfg.truth_seed, 1);
    const Eigen::VectorXd data = noisy(clean, cfg.noise_var, noise_rng);
    attach_model_likelihood(p, model, data, cfg.observe ? cfg.noise_var : std::numeric_limits<double>::infinity());
    return p;
}

MultiscaleProblem make_elliptic2d_problem(const EllipticConfig& cfg, int threads) {
    MultiscaleProblem p;
    p.name = "elliptic2d";
    const GridGeometry geom = GridGeometry::square(cfg.coarse, cfg.fine_per_coarse);
    fill_field_prior(p, cfg, geom);
    const int V = geom.coarse_count();

    // the 6-dim element parameterization comes from pilot prior draws
    Rng pilot_rng(cfg.truth_seed, 2);
    const Eigen::MatrixXd pilot = p.field_prior->sample(cfg.basis_pilot, pilot_rng);
    Eigen::MatrixXd packed(static_cast<Eigen::Index>(cfg.basis_pilot) * V, 10);
    parallel_for(cfg.basis_pilot, threads, [&](int s) {
        packed.middleRows(static_cast<Eigen::Index>(s) * V, V) = elemental_integrals_2d(pilot.row(s).transpose(), geom);
    });
    auto model = std::make_shared<const CoarseModel2D>(geom, reduce_elemental_2d(packed));
    const ReducedBasis2D basis = model->basis();
    p.coarse_dim = model->coarse_dim();
    p.upscale = [geom, basis](const Eigen::VectorXd& t) { return upscale_2d(t, geom, basis); };

    Rng truth_rng(cfg.truth_seed);
    p.truth = p.field_prior->sample_one(truth_rng);
    const Eigen::VectorXd heads = fine_fem_solve_2d(p.truth, geom);
    Eigen::VectorXd clean(model->observation_count());
    for (int k = 0; k < model->observation_count(); ++k)
        clean[k] = heads[coarse_to_fine_node_2d(geom, model->observed_nodes()[static_cast<std::size_t>(k)])];
    Rng noise_rng(cfg.truth_seed, 1);
    const Eigen::VectorXd data = noisy(clean, cfg.noise_var, noise_rng);
    attach_model_likelihood(p, model, data, cfg.observe ? cfg.noise_var : std::numeric_limits<double>::infinity());
    return p;
}

TargetDensity full_posterior(const MultiscaleProblem& problem) {
    require(problem.field_prior && problem.upscale_jacobian && problem.upscale_noise_var == 0.0, ErrorCode::Config,
            "full-dimensional posterior needs a Gaussian field prior and a deterministic, differentiable upscaler");
    TargetDensity t;
    t.dim = problem.fine_dim;
    auto prior = problem.field_prior;
    auto up = problem.upscale;
    auto upj = problem.upscale_jacobian;
    auto lik = problem.likelihood;
    t.logpdf = [=](const Eigen::VectorXd& th) {
        try {
            return prior->logpdf(th) + lik.log_likelihood(up(th));
        } catch (const Error&) {
            return kNegInf;
        }
    };
    t.logpdf_grad = [=](const Eigen::VectorXd& th, Eigen::VectorXd& g) {
        try {
            double v = 0.0;
            g = upj(th).transpose() * lik.gradient(up(th), &v) + prior->grad_logpdf(th);
            return v + prior->logpdf(th);
        } catch (const Error&) {
            g = Eigen::VectorXd::Zero(th.size());
            return kNegInf;
        }
    };
    return t;
}

Eigen::MatrixXd full_posterior_gn_hessian(const MultiscaleProblem& problem, const Eigen::VectorXd& theta) {
    const Eigen::VectorXd g = problem.upscale(theta);
    const Eigen::MatrixXd Ju = problem.upscale_jacobian(theta);
    Eigen::MatrixXd h = problem.field_prior->precision();
    if (std::isfinite(problem.likelihood.noise_var)) {
        const Eigen::MatrixXd J = problem.likelihood.jacobian(g) * Ju;
        h.noalias() += J.transpose() * J / problem.likelihood.noise_var;
    }
    return h;
}

// ------------------------------------------------------------------ maps

Eigen::MatrixXd generate_joint_prior(const MultiscaleProblem& problem, int K, std::uint64_t seed, int threads) {
    require(K >= 1, ErrorCode::Config, "K must be at least 1");
    problem.validate();
    Rng rng(seed);
    const Eigen::MatrixXd theta = problem.sample_prior(K, rng);
    Eigen::MatrixXd joint(K, problem.coarse_dim + problem.fine_dim);
    joint.rightCols(problem.fine_dim) = theta;
    parallel_for(K, threads, [&](int k) {
        const Eigen::VectorXd g = problem.upscale(theta.row(k).transpose());
        require(g.size() == problem.coarse_dim, ErrorCode::DimensionMismatch, "upscaler output dimension mismatch");
        joint.row(k).head(problem.coarse_dim) = g.transpose();
    });
    if (problem.upscale_noise_var > 0.0 || problem.upscale_noise_mean != 0.0) {
        const double s = std::sqrt(problem.upscale_noise_var);
        for (int k = 0; k < K; ++k)
            for (int c = 0; c < problem.coarse_dim; ++c) joint(k, c) += problem.upscale_noise_mean + s * rng.normal();
    }
    return joint;
}

void MapConfig::validate() const {
    require(coarse == "triangular" || coarse == "stationary", ErrorCode::Config,
            "maps.coarse must be 'triangular' or 'stationary'");
    require(fine == "cross_covariance" || fine == "joint" || fine == "local_cubic", ErrorCode::Config,
            "maps.fine must be 'cross_covariance', 'joint' or 'local_cubic'");
    require(coarse_degree >= 1 && fine_degree >= 1, ErrorCode::Config, "map degrees must be at least 1");
    require(inverse_degree == -1 || inverse_degree >= 1, ErrorCode::Config, "inverse_degree must be -1 or >= 1");
    require(fine == "cross_covariance" || coarse == "triangular", ErrorCode::Config,
            "triangular fine maps need a triangular coarse map");
    require(fine != "local_cubic" || fine_degree % 2 == 1, ErrorCode::Config, "local_cubic needs an odd fine degree");
    require(build.lambda_min > 0.0, ErrorCode::Config, "lambda_min must be positive");
}

void to_json(nlohmann::json& j, const MapConfig& c) {
    j = nlohmann::json{{"coarse", c.coarse},
                       {"coarse_degree", c.coarse_degree},
                       {"inverse_degree", c.inverse_degree},
                       {"fine", c.fine},
                       {"fine_degree", c.fine_degree},
                       {"max_pooled_samples", c.max_pooled_samples},
                       {"lambda_min", c.build.lambda_min}};
}

void from_json(const nlohmann::json& j, MapConfig& c) {
    c.coarse = j.value("coarse", c.coarse);
    c.coarse_degree = j.value("coarse_degree", c.coarse_degree);
    c.inverse_degree = j.value("inverse_degree", c.inverse_degree);
    c.fine = j.value("fine", c.fine);
    c.fine_degree = j.value("fine_degree", c.fine_degree);
    c.max_pooled_samples = j.value("max_pooled_samples", c.max_pooled_samples);
    c.build.lambda_min = j.value("lambda_min", c.build.lambda_min);
    c.validate();
}

Eigen::VectorXd MapBundle::fine_sample(const Eigen::VectorXd& rc, const Eigen::VectorXd& rf) const {
    require(rc.size() == coarse_dim && rf.size() == fine_dim, ErrorCode::DimensionMismatch,
            "reference dimensions do not match the fine map");
    if (linear) return linear->evaluate(rc, rf);
    require(joint_inverse.has_value(), ErrorCode::Config, "map bundle has no fine map");
    Eigen::VectorXd x(coarse_dim + fine_dim);
    x << rc, rf;
    return joint_inverse->evaluate_range(x, coarse_dim, fine_dim);
}

namespace {

Eigen::MatrixXd as_matrix(const Eigen::VectorXd& v) { return Eigen::MatrixXd(v); }

} // namespace

void MapBundle::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"coarse_dim", coarse_dim}, {"fine_dim", fine_dim}, {"coarse_kind", coarse_kind},
                     {"fine_kind", fine_kind}};
    if (const auto* t = dynamic_cast<const TriangularCoarseMap*>(coarse.get())) {
        j["coarse_forward"] = t->forward();
        j["coarse_inverse"] = t->inverse();
    } else if (const auto* s = dynamic_cast<const StationaryCoarseMap*>(coarse.get())) {
        j["marginal_forward"] = s->marginal_forward();
        j["marginal_inverse"] = s->marginal_inverse();
        write_sample_matrix(dir / "cholesky", s->cholesky_factor());
    }
    if (linear) {
        write_sample_matrix(dir / "linear_mean", as_matrix(linear->mean));
        write_sample_matrix(dir / "linear_gain", linear->gain);
        write_sample_matrix(dir / "linear_noise", linear->noise_factor);
        j["clipped_fraction"] = linear->clipped_fraction;
    }
    if (joint_forward) j["joint_forward"] = *joint_forward;
    if (joint_inverse) j["joint_inverse"] = *joint_inverse;
    write_json(dir / "maps.json", j);
}

MapBundle MapBundle::load(const std::filesystem::path& dir) {
    const auto j = read_json(dir / "maps.json");
    MapBundle b;
    b.coarse_dim = j.at("coarse_dim").get<int>();
    b.fine_dim = j.at("fine_dim").get<int>();
    b.coarse_kind = j.at("coarse_kind").get<std::string>();
    b.fine_kind = j.at("fine_kind").get<std::string>();
    if (b.coarse_kind == "stationary") {
        b.coarse = std::make_shared<StationaryCoarseMap>(j.at("marginal_forward").get<TriangularMap>(),
                                                         j.at("marginal_inverse").get<TriangularMap>(),
                                                         read_sample_matrix(dir / "cholesky"));
    } else {
        b.coarse = std::make_shared<TriangularCoarseMap>(j.at("coarse_forward").get<TriangularMap>(),
                                                         j.at("coarse_inverse").get<TriangularMap>());
    }
    if (b.fine_kind == "cross_covariance") {
        LinearConditionalMap m;
        m.mean = read_sample_matrix(dir / "linear_mean").col(0);
        m.gain = read_sample_matrix(dir / "linear_gain");
        m.noise_factor = read_sample_matrix(dir / "linear_noise");
        m.clipped_fraction = j.value("clipped_fraction", 0.0);
        m.clipped_warning = m.clipped_fraction > 1e-6;
        b.linear = std::move(m);
    }
    if (j.contains("joint_forward")) b.joint_forward = j.at("joint_forward").get<TriangularMap>();
    if (j.contains("joint_inverse")) b.joint_inverse = j.at("joint_inverse").get<TriangularMap>();
    require(b.coarse->dim() == b.coarse_dim, ErrorCode::DimensionMismatch, "stored coarse map dimension mismatch");
    return b;
}

MapBundle build_maps(const MultiscaleProblem& problem, const Eigen::MatrixXd& joint, const MapConfig& cfg, int threads,
                     MapBuildReport* report) {
    cfg.validate();
    const int dc = problem.coarse_dim, df = problem.fine_dim;
    require(joint.cols() == dc + df, ErrorCode::DimensionMismatch, "joint samples must have d_gamma + d_theta columns");
    const auto t0 = Clock::now();
    BuildOptions bopts = cfg.build;
    bopts.threads = threads;
    const int inv_degree = cfg.inverse_degree > 0 ? cfg.inverse_degree : cfg.coarse_degree;
    const Eigen::MatrixXd gamma = joint.leftCols(dc);
    const Eigen::MatrixXd theta = joint.rightCols(df);

    MapBundle b;
    b.coarse_dim = dc;
    b.fine_dim = df;
    b.coarse_kind = cfg.coarse;
    b.fine_kind = cfg.fine;
    MapBuildReport rep;

    if (cfg.fine == "cross_covariance") {
        Eigen::MatrixXd rc;
        if (cfg.coarse == "stationary") {
            require(problem.geometry.spatial_dim == 2 && dc % 6 == 0, ErrorCode::Config,
                    "stationary coarse maps need the 2D element parameterization");
            StationaryBuildOptions so;
            so.degree = cfg.coarse_degree;
            so.inverse_degree = cfg.inverse_degree;
            so.max_pooled_samples = cfg.max_pooled_samples;
            so.build = bopts;
            auto sm = std::make_shared<StationaryCoarseMap>(build_stationary_coarse_map(gamma, 6, so));
            rc = sm->to_reference_many(gamma);
            b.coarse = sm;
        } else {
            TriangularMap fwd = build_map(gamma, total_degree_sets(dc, cfg.coarse_degree), bopts, &rep.coarse_diagnostics);
            rc = fwd.evaluate_many(gamma);
            TriangularMap inv = build_inverse_regression(rc, gamma, total_degree_sets(dc, inv_degree), threads);
            b.coarse = std::make_shared<TriangularCoarseMap>(std::move(fwd), std::move(inv));
        }
        b.linear = cross_covariance_map(theta, rc, problem.prior_mean, problem.prior_cov);
    } else {
        require(cfg.fine != "local_cubic" || problem.geometry.spatial_dim == 1, ErrorCode::Config,
                "local_cubic fine maps are defined for 1D problems");
        std::vector<MultiIndexSet> fwd_sets = total_degree_sets(dc, cfg.coarse_degree);
        std::vector<MultiIndexSet> inv_sets = total_degree_sets(dc, inv_degree);
        for (int i = 1; i <= df; ++i) {
            MultiIndexSet s = cfg.fine == "joint"
                                  ? total_degree_set(dc + i, cfg.fine_degree)
                                  : localized_set_1d(i, dc, problem.geometry.fine_per_coarse, cfg.fine_degree);
            fwd_sets.push_back(s);
            inv_sets.push_back(cfg.fine == "joint" && cfg.inverse_degree > 0 ? total_degree_set(dc + i, inv_degree) : s);
        }
        std::vector<ComponentDiagnostics> diag;
        TriangularMap fwd = build_map(joint, fwd_sets, bopts, &diag);
        const Eigen::MatrixXd r = fwd.evaluate_many(joint);
        TriangularMap inv = build_inverse_regression(r, joint, inv_sets, threads);
        rep.coarse_diagnostics.assign(diag.begin(), diag.begin() + dc);
        rep.fine_diagnostics.assign(diag.begin() + dc, diag.end());
        b.coarse = std::make_shared<TriangularCoarseMap>(fwd.head(dc), inv.head(dc));
        b.joint_forward = std::move(fwd);
        b.joint_inverse = std::move(inv);
    }
    rep.seconds = seconds_since(t0);
    if (report) *report = std::move(rep);
    return b;
}

// ------------------------------------------------------ coarse posterior

TargetDensity coarse_posterior(const CoarseLikelihood& likelihood, std::shared_ptr<const CoarseMap> map) {
    TargetDensity t;
    t.dim = map->dim();
    const double log_norm = -0.5 * t.dim * std::log(2.0 * M_PI);
    t.logpdf = [likelihood, map, log_norm](const Eigen::VectorXd& r) {
        try {
            return likelihood.log_likelihood(map->to_coarse(r)) - 0.5 * r.squaredNorm() + log_norm;
        } catch (const Error&) {
            return kNegInf;
        }
    };
    t.logpdf_grad = [likelihood, map, log_norm](const Eigen::VectorXd& r, Eigen::VectorXd& g) {
        try {
            double v = 0.0;
            const Eigen::VectorXd gl = likelihood.gradient(map->to_coarse(r), &v);
            g = map->to_coarse_jacobian(r).transpose() * gl - r;
            return v - 0.5 * r.squaredNorm() + log_norm;
        } catch (const Error&) {
            g = Eigen::VectorXd::Zero(r.size());
            return kNegInf;
        }
    };
    return t;
}

Eigen::MatrixXd coarse_posterior_gn_hessian(const CoarseLikelihood& likelihood, const CoarseMap& map,
                                            const Eigen::VectorXd& r) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Identity(r.size(), r.size());
    if (!std::isfinite(likelihood.noise_var)) return h;
    const Eigen::MatrixXd J = likelihood.jacobian(map.to_coarse(r)) * map.to_coarse_jacobian(r);
    h.noalias() += J.transpose() * J / likelihood.noise_var;
    return h;
}

void SamplerSettings::validate() const {
    require(kind == "dram" || kind == "premala", ErrorCode::Config, "sampler.kind must be 'dram' or 'premala'");
    require(steps >= 1, ErrorCode::Config, "sampler.steps (N) must be at least 1");
    require(burn_in >= -1, ErrorCode::Config, "sampler.burn_in must be -1 or nonnegative");
    require(step_size > 0.0, ErrorCode::Config, "sampler.step_size must be positive");
    require(dr_stages == 1 || dr_stages == 2, ErrorCode::Config, "sampler.dr_stages must be 1 or 2");
}

ChainConfig SamplerSettings::chain_config(std::uint64_t seed) const {
    validate();
    ChainConfig c;
    // burn-in defaults to 20% of the whole chain: N retained = 80%
    const int burn = burn_in >= 0 ? burn_in : steps / 4;
    c.steps = steps + burn;
    c.burn_in = burn;
    c.seed = seed;
    c.step_size = step_size;
    c.target_acceptance = target_acceptance;
    c.dr_stages = dr_stages;
    return c;
}

void to_json(nlohmann::json& j, const SamplerSettings& s) {
    j = nlohmann::json{{"kind", s.kind},           {"steps", s.steps},
                       {"burn_in", s.burn_in},     {"step_size", s.step_size},
                       {"target_acceptance", s.target_acceptance}, {"start_at_map", s.start_at_map},
                       {"dr_stages", s.dr_stages}};
}

void from_json(const nlohmann::json& j, SamplerSettings& s) {
    s.kind = j.value("kind", s.kind);
    s.steps = j.value("steps", s.steps);
    s.burn_in = j.value("burn_in", s.burn_in);
    s.step_size = j.value("step_size", s.step_size);
    s.target_acceptance = j.value("target_acceptance", s.target_acceptance);
    s.start_at_map = j.value("start_at_map", s.start_at_map);
    s.dr_stages = j.value("dr_stages", s.dr_stages);
    s.validate();
}

ChainResult run_chain_from_map(const TargetDensity& target, const SamplerSettings& settings, std::uint64_t seed,
                               const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& neg_hessian,
                               const Eigen::VectorXd& start, Eigen::VectorXd* map_point) {
    ChainConfig cfg = settings.chain_config(seed);
    const int d = target.dim;
    Eigen::VectorXd x0 = start.size() ? start : Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(d, d);
    if (settings.start_at_map) {
        const MapResult m = find_map(target, x0, neg_hessian);
        x0 = m.point;
        cov = symmetric_inverse(m.hessian);
    }
    if (map_point) *map_point = x0;
    cfg.start = x0;
    if (settings.kind == "dram") {
        cfg.preconditioner = (2.38 * 2.38 / d) * cov;
        return dram_run(target, cfg);
    }
    cfg.preconditioner = cov;
    return premala_run(target, cfg);
}

CoarseSamplingResult sample_coarse(const MultiscaleProblem& problem, const MapBundle& maps,
                                   const SamplerSettings& settings, std::uint64_t seed) {
    require(maps.coarse_dim == problem.coarse_dim, ErrorCode::DimensionMismatch, "coarse map does not fit the problem");
    const TargetDensity target = coarse_posterior(problem.likelihood, maps.coarse);
    const auto& lik = problem.likelihood;
    const auto& cmap = *maps.coarse;
    CoarseSamplingResult out;
    out.chain = run_chain_from_map(
        target, settings, seed, [&](const Eigen::VectorXd& r) { return coarse_posterior_gn_hessian(lik, cmap, r); },
        Eigen::VectorXd::Zero(problem.coarse_dim), &out.map_point);
    out.coarse.resize(out.chain.samples.rows(), problem.coarse_dim);
    for (Eigen::Index i = 0; i < out.chain.samples.rows(); ++i)
        out.coarse.row(i) = cmap.to_coarse(out.chain.samples.row(i).transpose()).transpose();
    return out;
}

Eigen::MatrixXd prolong(const Eigen::MatrixXd& coarse_ref, const MapBundle& maps, int M, std::uint64_t seed,
                        int threads) {
    require(M >= 1, ErrorCode::Config, "M must be at least 1");
    require(coarse_ref.cols() == maps.coarse_dim, ErrorCode::DimensionMismatch, "coarse samples do not match the map");
    const int N = static_cast<int>(coarse_ref.rows());
    Eigen::MatrixXd out(static_cast<Eigen::Index>(N) * M, maps.fine_dim);
    parallel_for(N, threads, [&](int i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        const Eigen::VectorXd rc = coarse_ref.row(i).transpose();
        for (int j = 0; j < M; ++j)
            out.row(static_cast<Eigen::Index>(i) * M + j) = maps.fine_sample(rc, rng.normal_vector(maps.fine_dim)).transpose();
    });
    return out;
}

Eigen::MatrixXd prolong(const Eigen::MatrixXd& coarse_ref, const LinearConditionalMap& map, int M, std::uint64_t seed) {
    MapBundle b;
    b.coarse_dim = map.coarse_dim();
    b.fine_dim = map.fine_dim();
    b.linear = map;
    return prolong(coarse_ref, b, M, seed);
}

// ---------------------------------------------------------------- budget

Allocation optimal_allocation(const BudgetModel& b) {
    require(b.C1 > 0.0 && b.C2 > 0.0 && b.t_c > 0.0 && b.t_f > 0.0 && b.t_tot > 0.0, ErrorCode::Config,
            "budget constants must all be positive");
    const double a = b.C1 * b.t_c, c = b.C2 * b.t_f;
    const double root = std::sqrt(b.C1 * b.C2 * b.t_c * b.t_f);
    if (std::abs(a - c) <= 1e-12 * std::max(a, c))
        throw Error(ErrorCode::DegenerateBudget, "C1 t_c equals C2 t_f; the closed-form allocation is undefined");
    Allocation out;
    out.N = b.t_tot * (a - root) / (b.C1 * b.t_c * b.t_c - b.C2 * b.t_c * b.t_f);
    out.M_raw = (b.t_c / b.t_f) * ((a - c) / (a - root) - 1.0);
    out.M = std::max(1, static_cast<int>(std::lround(out.M_raw)));
    return out;
}

VarianceFit estimate_variance_constants(const std::vector<VarianceMeasurement>& ms) {
    require(!ms.empty(), ErrorCode::SingularFit, "no variance measurements");
    const Eigen::Index n = static_cast<Eigen::Index>(ms.size());
    Eigen::MatrixXd A(n, 2);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& m = ms[static_cast<std::size_t>(i)];
        require(m.N > 0.0 && m.M > 0.0, ErrorCode::Config, "N and M must be positive");
        A(i, 0) = 1.0 / m.N;
        A(i, 1) = 1.0 / (m.N * m.M);
        y[i] = m.variance;
    }
    // scale columns so the rank test is insensitive to the magnitude of N
    const Eigen::Vector2d scale = A.colwise().norm().transpose();
    const Eigen::MatrixXd As = A * scale.cwiseInverse().asDiagonal();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(As);
    qr.setThreshold(1e-10);
    if (qr.rank() < 2) throw Error(ErrorCode::SingularFit, "(1/N, 1/(NM)) measurements are collinear");
    Eigen::Vector2d c = qr.solve(y).cwiseQuotient(scale);

    VarianceFit fit;
    for (int k = 0; k < 2; ++k) {
        if (c[k] < 0.0) {
            // refit the remaining constant alone
            const int o = 1 - k;
            c[k] = 0.0;
            c[o] = std::max(0.0, A.col(o).dot(y) / A.col(o).squaredNorm());
            fit.clipped = true;
        }
    }
    fit.C1 = c[0];
    fit.C2 = c[1];
    const Eigen::VectorXd resid = y - A * c;
    const double tss = (y.array() - y.mean()).square().sum();
    fit.r_squared = tss > 0.0 ? 1.0 - resid.squaredNorm() / tss : 1.0;
    return fit;
}

// -------------------------------------------------------------- pipeline

void PipelineOptions::validate() const {
    require(K >= 1, ErrorCode::Config, "K must be at least 1");
    require(M >= 1, ErrorCode::Config, "M must be at least 1");
    require(threads >= 1, ErrorCode::Config, "threads must be at least 1");
    maps.validate();
    sampler.validate();
}

void to_json(nlohmann::json& j, const PipelineOptions& o) {
    j = nlohmann::json{{"K", o.K}, {"maps", o.maps}, {"sampler", o.sampler}, {"M", o.M}, {"seed", o.seed},
                       {"threads", o.threads}};
}

void from_json(const nlohmann::json& j, PipelineOptions& o) {
    o.K = j.value("K", o.K);
    if (j.contains("maps")) o.maps = j.at("maps").get<MapConfig>();
    if (j.contains("sampler")) o.sampler = j.at("sampler").get<SamplerSettings>();
    o.M = j.value("M", o.M);
    o.seed = j.value("seed", o.seed);
    o.threads = j.value("threads", o.threads);
    o.validate();
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
    Rng r(seed, static_cast<std::uint64_t>(stage));
    return r.engine()();
}

nlohmann::json PosteriorEnsemble::provenance() const {
    return nlohmann::json{{"N", N},
                          {"M", M},
                          {"seed", seed},
                          {"row_order", "fine row i*M + j comes from coarse row i"},
                          {"seeds",
                           {{"prior", stage_seed(seed, Stage::Prior)},
                            {"chain", stage_seed(seed, Stage::Chain)},
                            {"prolong", stage_seed(seed, Stage::Prolong)}}},
                          {"timings",
                           {{"prior", timings.prior},
                            {"maps", timings.maps},
                            {"coarse_mcmc", timings.coarse_mcmc},
                            {"prolong", timings.prolong},
                            {"t_c", timings.t_c},
                            {"t_f", timings.t_f}}},
                          {"chain", chain}};
}

PosteriorEnsemble run_posterior(const MultiscaleProblem& problem, const MapBundle& maps, const PipelineOptions& o) {
    o.validate();
    PosteriorEnsemble ens;
    ens.seed = o.seed;
    ens.M = o.M;
    auto t0 = Clock::now();
    CoarseSamplingResult cs =
        in_stage("coarse MCMC", [&] { return sample_coarse(problem, maps, o.sampler, stage_seed(o.seed, Stage::Chain)); });
    ens.timings.coarse_mcmc = seconds_since(t0);
    ens.chain = std::move(cs.chain);
    ens.coarse_reference = ens.chain.samples;
    ens.coarse = std::move(cs.coarse);
    ens.N = static_cast<int>(ens.coarse_reference.rows());
    t0 = Clock::now();
    ens.fine = in_stage("prolongation", [&] {
        return prolong(ens.coarse_reference, maps, o.M, stage_seed(o.seed, Stage::Prolong), o.threads);
    });
    ens.timings.prolong = seconds_since(t0);
    ens.timings.t_c = ens.timings.coarse_mcmc / ens.N;
    ens.timings.t_f = ens.timings.prolong / (double(ens.N) * o.M);
    return ens;
}

PosteriorEnsemble run_pipeline(const MultiscaleProblem& problem, const PipelineOptions& o, MapBundle* maps_out) {
    o.validate();
    in_stage("problem", [&] { problem.validate(); });
    auto t0 = Clock::now();
    const Eigen::MatrixXd joint = in_stage(
        "prior sampling", [&] { return generate_joint_prior(problem, o.K, stage_seed(o.seed, Stage::Prior), o.threads); });
    const double t_prior = seconds_since(t0);
    t0 = Clock::now();
    MapBundle maps = in_stage("map construction", [&] { return build_maps(problem, joint, o.maps, o.threads); });
    const double t_maps = seconds_since(t0);
    PosteriorEnsemble ens = run_posterior(problem, maps, o);
    ens.timings.prior = t_prior;
    ens.timings.maps = t_maps;
    if (maps_out) *maps_out = std::move(maps);
    return ens;
}

} // namespace mstm
