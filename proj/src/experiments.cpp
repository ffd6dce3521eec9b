#include "mstm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mstm/diagnostics.hpp"
#include "mstm/error.hpp"
#include "mstm/rng.hpp"

namespace mstm {

MultiscaleProblem make_problem(const nlohmann::json& spec, int threads) {
    require(spec.is_object() && spec.contains("type"), ErrorCode::Config, "problem block needs a \"type\"");
    const std::string type = spec.at("type").get<std::string>();
    try {
        if (type == "toy") return make_toy_problem(spec.value("observed", 0.5));
        EllipticConfig ec = spec.get<EllipticConfig>();
        if (type == "elliptic1d") return make_elliptic1d_problem(ec);
        if (type == "elliptic2d") return make_elliptic2d_problem(ec, threads);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("problem block: ") + e.what());
    }
    throw Error(ErrorCode::Config, "unknown problem type '" + type + "'");
}

// ------------------------------------------------------------------ toy

void ToyStudyConfig::validate() const {
    require(!degrees.empty(), ErrorCode::Config, "toy: no map degrees");
    for (int p : degrees) require(p >= 1, ErrorCode::Config, "toy: map degree must be >= 1");
    require(K >= 2, ErrorCode::Config, "toy: K must be >= 2");
    require(replicates >= 1, ErrorCode::Config, "toy: replicates must be >= 1");
    require(grid >= 3, ErrorCode::Config, "toy: grid needs at least 3 points");
    require(hi > lo, ErrorCode::Config, "toy: empty grid box");
    require(M >= 1, ErrorCode::Config, "toy: M must be >= 1");
    sampler.validate();
}

void to_json(nlohmann::json& j, const ToyStudyConfig& c) {
    j = nlohmann::json{{"observed", c.observed}, {"degrees", c.degrees}, {"K", c.K},     {"replicates", c.replicates},
                       {"grid", c.grid},         {"lo", c.lo},           {"hi", c.hi},   {"sampler", c.sampler},
                       {"M", c.M}};
}

void from_json(const nlohmann::json& j, ToyStudyConfig& c) {
    c.observed = j.value("observed", c.observed);
    c.degrees = j.value("degrees", c.degrees);
    c.K = j.value("K", c.K);
    c.replicates = j.value("replicates", c.replicates);
    c.grid = j.value("grid", c.grid);
    c.lo = j.value("lo", c.lo);
    c.hi = j.value("hi", c.hi);
    if (j.contains("sampler")) c.sampler = j.at("sampler").get<SamplerSettings>();
    c.M = j.value("M", c.M);
}

PipelineOptions toy_pipeline_options(const ToyStudyConfig& cfg, int degree, std::uint64_t seed) {
    PipelineOptions o;
    o.K = cfg.K;
    o.maps.coarse = "triangular";
    o.maps.coarse_degree = degree;
    o.maps.fine = "joint";
    o.maps.fine_degree = degree;
    o.sampler = cfg.sampler;
    o.M = cfg.M;
    o.seed = seed;
    return o;
}

double toy_kl(const ToyStudyConfig& cfg, const Eigen::MatrixXd& samples) {
    require(samples.cols() == 2, ErrorCode::DimensionMismatch, "toy samples must have two columns");
    const Eigen::VectorXd g = linspace(cfg.lo, cfg.hi, cfg.grid);
    const double h = g[1] - g[0];
    return kl_on_grid(ToyModel::exact_log_posterior_grid(g, g, cfg.observed), kde_2d(samples, g, g), h * h);
}

std::vector<KlSummary> summarize_kl(const std::vector<ToyReplicate>& runs, const std::vector<int>& degrees) {
    std::vector<KlSummary> out;
    for (int p : degrees) {
        std::vector<double> v;
        for (const auto& r : runs)
            if (r.degree == p) v.push_back(r.kl);
        KlSummary s;
        s.degree = p;
        if (v.empty()) {
            s.mean = s.std_error = std::numeric_limits<double>::quiet_NaN();
        } else {
            const Eigen::Map<const Eigen::VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
            s.mean = x.mean();
            s.std_error = v.size() > 1 ? std::sqrt((x.array() - s.mean).square().sum() / (v.size() - 1.0) / v.size()) : 0.0;
        }
        out.push_back(s);
    }
    return out;
}

bool kl_monotone_within_se(const std::vector<KlSummary>& s) {
    for (std::size_t i = 1; i < s.size(); ++i) {
        const double slack = std::max(s[i].std_error, s[i - 1].std_error);
        if (!(s[i].mean <= s[i - 1].mean + slack)) return false;
    }
    return true;
}

// --------------------------------------------------------- quantile bias

Eigen::MatrixXd quantile_bias(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const std::vector<int>& columns,
                              const std::vector<double>& levels) {
    require(a.cols() == b.cols(), ErrorCode::DimensionMismatch, "sample sets differ in width");
    const Eigen::MatrixXd qa = quantiles(a, levels), qb = quantiles(b, levels);
    Eigen::MatrixXd bias(levels.size(), columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
        require(columns[c] >= 0 && columns[c] < a.cols(), ErrorCode::DimensionMismatch, "column out of range");
        bias.col(c) = (qa.col(columns[c]) - qb.col(columns[c])).cwiseAbs();
    }
    return bias;
}

// ------------------------------------------------------ variance study

std::vector<VarianceMeasurement> run_variance_study(const MultiscaleProblem& problem, const MapBundle& maps,
                                                    const SamplerSettings& sampler, const VarianceStudyConfig& cfg,
                                                    std::uint64_t seed, int threads) {
    require(cfg.replicates >= 2, ErrorCode::TooFewReplicates, "variance study needs at least two replicates");
    require(cfg.column >= 0 && cfg.column < problem.fine_dim, ErrorCode::Config, "estimator column out of range");
    std::vector<VarianceMeasurement> out;
    std::uint64_t stream = 0;
    for (int N : cfg.N)
        for (int M : cfg.M) {
            Eigen::VectorXd est(cfg.replicates);
            for (int r = 0; r < cfg.replicates; ++r) {
                PipelineOptions o;
                o.sampler = sampler;
                o.sampler.steps = N;
                o.M = M;
                o.threads = threads;
                o.seed = Rng(seed, ++stream).engine()();
                est[r] = run_posterior(problem, maps, o).fine.col(cfg.column).mean();
            }
            const double m = est.mean();
            out.push_back({double(N), double(M), (est.array() - m).square().sum() / (cfg.replicates - 1.0)});
        }
    return out;
}

// ---------------------------------------------------- coarse-map fidelity

BlockMomentError block_moment_error(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& candidate, int block) {
    require(block >= 1 && reference.cols() == candidate.cols() && reference.cols() % block == 0,
            ErrorCode::DimensionMismatch, "sample widths must agree and hold whole blocks");
    require(reference.rows() >= 2 && candidate.rows() >= 2, ErrorCode::EmptySampleSet, "need two samples per set");
    auto moments = [](const Eigen::MatrixXd& x) {
        const Eigen::RowVectorXd mu = x.colwise().mean();
        const Eigen::MatrixXd c = x.rowwise() - mu;
        return std::pair<Eigen::RowVectorXd, Eigen::MatrixXd>(mu, c.transpose() * c / double(x.rows() - 1));
    };
    BlockMomentError err;
    for (int e = 0; e < reference.cols() / block; ++e) {
        const auto [ma, ca] = moments(reference.middleCols(block * e, block));
        const auto [mb, cb] = moments(candidate.middleCols(block * e, block));
        const Eigen::VectorXd sd = ca.diagonal().cwiseSqrt();
        for (int i = 0; i < block; ++i) {
            const double dm = std::abs(ma[i] - mb[i]) / sd[i];
            if (dm > err.mean) {
                err.mean = dm;
                err.worst_mean_element = e;
            }
            for (int k = 0; k < block; ++k) {
                const double dc = std::abs(ca(i, k) - cb(i, k)) / (sd[i] * sd[k]);
                if (dc > err.covariance) {
                    err.covariance = dc;
                    err.worst_cov_element = e;
                }
            }
        }
    }
    return err;
}

Eigen::MatrixXd sample_coarse_map(const CoarseMap& map, int n, std::uint64_t seed) {
    require(n >= 1, ErrorCode::Config, "sample count must be positive");
    Rng rng(seed);
    Eigen::MatrixXd out(n, map.dim());
    for (int i = 0; i < n; ++i) out.row(i) = map.to_coarse(rng.normal_vector(map.dim())).transpose();
    return out;
}

// ------------------------------------------------------------- fields

Eigen::MatrixXd to_grid_order(const Eigen::MatrixXd& fields, const GridGeometry& geom) {
    require(fields.cols() == geom.fine_count(), ErrorCode::DimensionMismatch, "field width does not match the grid");
    const int nx = geom.fine_x(), ny = geom.fine_y();
    Eigen::MatrixXd out(fields.rows(), fields.cols());
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) out.col(iy * nx + ix) = fields.col(geom.cell_index(ix, iy));
    return out;
}

double lag1_variogram(const Eigen::MatrixXd& fields, const GridGeometry& geom) {
    require(fields.rows() >= 1, ErrorCode::EmptySampleSet, "no fields");
    const Eigen::MatrixXd g = to_grid_order(fields, geom);
    const int nx = geom.fine_x(), ny = geom.fine_y();
    double sum = 0.0;
    long long pairs = 0;
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            const int c = iy * nx + ix;
            if (ix + 1 < nx) {
                sum += (g.col(c + 1) - g.col(c)).squaredNorm();
                pairs += g.rows();
            }
            if (iy + 1 < ny) {
                sum += (g.col(c + nx) - g.col(c)).squaredNorm();
                pairs += g.rows();
            }
        }
    require(pairs > 0, ErrorCode::DimensionMismatch, "grid has no neighbouring cells");
    return 0.5 * sum / double(pairs);
}

} // namespace mstm
