#pragma once

// Multiscale inference pipeline: joint prior sampling, coarse/fine map
// construction, coarse posterior sampling in reference coordinates,
// fine-scale prolongation, and the coarse/fine sample budget.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "mstm/msfem.hpp"
#include "mstm/prior.hpp"
#include "mstm/rng.hpp"
#include "mstm/sampler.hpp"
#include "mstm/transport.hpp"

namespace mstm {

/// Gaussian observation model d = G(gamma) + noise on the coarse parameter.
struct CoarseLikelihood {
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> observe;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian; // dG/dgamma
    /// Optional faster value+gradient path (e.g. adjoint solves).
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double*)> value_gradient;
    Eigen::VectorXd data;
    double noise_var = 1.0; // +inf: data carry no information

    double log_likelihood(const Eigen::VectorXd& gamma) const;
    Eigen::VectorXd gradient(const Eigen::VectorXd& gamma, double* value = nullptr) const;
    /// J^T J / noise_var.
    Eigen::MatrixXd gauss_newton(const Eigen::VectorXd& gamma) const;
};

struct MultiscaleProblem {
    std::string name;
    int coarse_dim = 0;
    int fine_dim = 0;
    GridGeometry geometry;
    std::shared_ptr<const GaussianFieldPrior> field_prior; // null for the toy problem
    Eigen::VectorXd prior_mean;
    Eigen::MatrixXd prior_cov;
    /// Deterministic part of the upscaler; upscale_noise_* add independent Gaussian noise.
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> upscale;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> upscale_jacobian; // optional
    double upscale_noise_mean = 0.0;
    double upscale_noise_var = 0.0;
    CoarseLikelihood likelihood;
    std::shared_ptr<const CoarseModel> coarse_model; // elliptic problems
    Eigen::VectorXd truth;                           // synthetic truth, if any

    Eigen::MatrixXd sample_prior(int n, Rng& rng) const;
    void validate() const;
};

// ------------------------------------------------------------------ toy

/// Two fine parameters, gamma = 1/(1 + e^-t1 + e^-t2) + eta_f, d = atan(gamma) + eta_c.
struct ToyModel {
    static constexpr double fine_noise_mean = -0.3;
    static constexpr double fine_noise_var = 1.5e-3;
    static constexpr double coarse_noise_var = 1e-2;
    static double harmonic(double t1, double t2);
    /// Unnormalised log posterior of theta given d, gamma integrated out by Gauss-Hermite quadrature.
    static double exact_log_posterior(double t1, double t2, double d, int nodes = 32);
    /// Log posterior evaluated on grid_x x grid_y.
    static Eigen::MatrixXd exact_log_posterior_grid(const Eigen::VectorXd& gx, const Eigen::VectorXd& gy, double d);
};

MultiscaleProblem make_toy_problem(double observed);

/// Nodes and weights (summing to 1) of Gauss-Hermite quadrature for N(0, 1).
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite_normal(int n);

// ------------------------------------------------------------ elliptic

struct EllipticConfig {
    int coarse = 10;
    int fine_per_coarse = 10;
    double sigma2 = 1.0;
    double length = 0.1;
    double noise_var = 1e-4;
    std::uint64_t truth_seed = 7;
    int basis_pilot = 200;  // 2D: prior draws used for the 6-dim reduction
    bool observe = true;    // false: no observations (prior-only limit)
};
void to_json(nlohmann::json& j, const EllipticConfig& c);
void from_json(const nlohmann::json& j, EllipticConfig& c);

/// 1D pressure problem on (0,1): h(0)=0, h(1)=1, f=0; data at interior coarse
/// nodes from a fine Galerkin solve of a prior draw, plus noise.
MultiscaleProblem make_elliptic1d_problem(const EllipticConfig& cfg);
/// 2D problem on the unit square with the reduced 6-dim element parameters.
MultiscaleProblem make_elliptic2d_problem(const EllipticConfig& cfg, int threads = 1);

/// Full-dimensional posterior on theta (benchmark): prior + likelihood(upscale(theta)).
TargetDensity full_posterior(const MultiscaleProblem& problem);
/// Gauss-Newton negative Hessian of the full posterior.
Eigen::MatrixXd full_posterior_gn_hessian(const MultiscaleProblem& problem, const Eigen::VectorXd& theta);

// ---------------------------------------------------------------- maps

/// Rows (gamma, theta): coarse block first. Upscaler work runs on `threads`.
Eigen::MatrixXd generate_joint_prior(const MultiscaleProblem& problem, int K, std::uint64_t seed, int threads = 1);

struct MapConfig {
    std::string coarse = "triangular"; // triangular | stationary
    int coarse_degree = 3;
    int inverse_degree = -1; // regression inverse degree (-1: same as forward)
    std::string fine = "cross_covariance"; // cross_covariance | joint | local_cubic
    int fine_degree = 3;
    int max_pooled_samples = 0; // stationary map pool cap
    BuildOptions build;
    void validate() const;
};
void to_json(nlohmann::json& j, const MapConfig& c);
void from_json(const nlohmann::json& j, MapConfig& c);

/// Built coarse and fine maps. For fine = joint / local_cubic the fine map is
/// the tail of a triangular inverse map on (r_c, r_f).
struct MapBundle {
    int coarse_dim = 0;
    int fine_dim = 0;
    std::string coarse_kind;
    std::string fine_kind;
    std::shared_ptr<const CoarseMap> coarse;
    std::optional<LinearConditionalMap> linear;
    std::optional<TriangularMap> joint_forward;
    std::optional<TriangularMap> joint_inverse;

    Eigen::VectorXd fine_sample(const Eigen::VectorXd& coarse_ref, const Eigen::VectorXd& fine_ref) const;
    void save(const std::filesystem::path& dir) const;
    static MapBundle load(const std::filesystem::path& dir);
};

struct MapBuildReport {
    double seconds = 0.0;
    std::vector<ComponentDiagnostics> coarse_diagnostics;
    std::vector<ComponentDiagnostics> fine_diagnostics;
};

MapBundle build_maps(const MultiscaleProblem& problem, const Eigen::MatrixXd& joint, const MapConfig& cfg,
                     int threads = 1, MapBuildReport* report = nullptr);

// ------------------------------------------------- coarse posterior / MCMC

/// log pi(d | S_c(r)) + log N(r; 0, I) (likelihood without its constant),
/// with gradient J_S^T grad_gamma - r.
TargetDensity coarse_posterior(const CoarseLikelihood& likelihood, std::shared_ptr<const CoarseMap> map);
/// (J_G J_S)^T (J_G J_S) / noise_var + I.
Eigen::MatrixXd coarse_posterior_gn_hessian(const CoarseLikelihood& likelihood, const CoarseMap& map,
                                            const Eigen::VectorXd& r);

struct SamplerSettings {
    std::string kind = "dram"; // dram | premala
    int steps = 20000;         // retained steps N (after burn-in)
    int burn_in = -1;          // -1: 20% of the total chain
    double step_size = 1.0;
    double target_acceptance = -1.0;
    bool start_at_map = true;
    int dr_stages = 2;
    void validate() const;
    ChainConfig chain_config(std::uint64_t seed) const;
};
void to_json(nlohmann::json& j, const SamplerSettings& s);
void from_json(const nlohmann::json& j, SamplerSettings& s);

struct CoarseSamplingResult {
    ChainResult chain;
    Eigen::MatrixXd coarse; // gamma = S_c(r_c) per retained row
    Eigen::VectorXd map_point;
};

CoarseSamplingResult sample_coarse(const MultiscaleProblem& problem, const MapBundle& maps,
                                   const SamplerSettings& settings, std::uint64_t seed);

/// Runs a sampler on any target starting from its MAP (Gauss-Newton or
/// finite-difference Hessian) with the inverse Hessian as preconditioner.
ChainResult run_chain_from_map(const TargetDensity& target, const SamplerSettings& settings, std::uint64_t seed,
                               const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& neg_hessian,
                               const Eigen::VectorXd& start, Eigen::VectorXd* map_point = nullptr);

/// M fine samples per coarse reference row; row i*M + j comes from coarse row i.
Eigen::MatrixXd prolong(const Eigen::MatrixXd& coarse_ref, const MapBundle& maps, int M, std::uint64_t seed,
                        int threads = 1);
Eigen::MatrixXd prolong(const Eigen::MatrixXd& coarse_ref, const LinearConditionalMap& map, int M, std::uint64_t seed);

// --------------------------------------------------------------- budget

struct BudgetModel {
    double C1 = 0.0;
    double C2 = 0.0;
    double t_c = 0.0;
    double t_f = 0.0;
    double t_tot = 0.0;
};

struct Allocation {
    double N = 0.0;
    double M_raw = 0.0;
    int M = 1;
};

Allocation optimal_allocation(const BudgetModel& budget);

struct VarianceMeasurement {
    double N = 0.0;
    double M = 0.0;
    double variance = 0.0;
};

struct VarianceFit {
    double C1 = 0.0;
    double C2 = 0.0;
    double r_squared = 0.0;
    bool clipped = false; // a negative constant was clipped at zero
};

/// Least squares Var = C1/N + C2/(NM).
VarianceFit estimate_variance_constants(const std::vector<VarianceMeasurement>& measurements);

// ------------------------------------------------------------- pipeline

struct PipelineOptions {
    int K = 10000;
    MapConfig maps;
    SamplerSettings sampler;
    int M = 1;
    std::uint64_t seed = 1;
    int threads = 1;
    void validate() const;
};
void to_json(nlohmann::json& j, const PipelineOptions& o);
void from_json(const nlohmann::json& j, PipelineOptions& o);

struct PipelineTimings {
    double prior = 0.0;
    double maps = 0.0;
    double coarse_mcmc = 0.0;
    double prolong = 0.0;
    double t_c = 0.0; // per coarse sample
    double t_f = 0.0; // per fine sample
};

struct PosteriorEnsemble {
    Eigen::MatrixXd coarse_reference; // N x d_c
    Eigen::MatrixXd coarse;           // N x d_c (gamma)
    Eigen::MatrixXd fine;             // N M x d_theta
    int N = 0;
    int M = 0;
    std::uint64_t seed = 0;
    ChainResult chain;
    PipelineTimings timings;
    nlohmann::json provenance() const;
};

/// Stream-split seeds used by the pipeline stages.
enum class Stage : std::uint64_t { Prior = 1, Chain = 2, Prolong = 3 };
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

/// Steps 1-5 end to end. Errors are rethrown with the failing stage prefixed.
PosteriorEnsemble run_pipeline(const MultiscaleProblem& problem, const PipelineOptions& options,
                               MapBundle* maps_out = nullptr);
/// Steps 4-5 with already built maps.
PosteriorEnsemble run_posterior(const MultiscaleProblem& problem, const MapBundle& maps, const PipelineOptions& options);

} // namespace mstm
