#pragma once

// Experiment drivers shared by the command-line tool and the acceptance
// suite: problem construction from JSON, toy KL replicates, quantile bias
// tables, replicated variance studies, and 2D coarse-map fidelity.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mstm/engine.hpp"

namespace mstm {

/// {"type": "toy", "observed": d} or {"type": "elliptic1d" | "elliptic2d", ...EllipticConfig}.
MultiscaleProblem make_problem(const nlohmann::json& spec, int threads = 1);

// ------------------------------------------------------------------ toy

struct ToyStudyConfig {
    double observed = 0.5;
    std::vector<int> degrees{1, 3, 5, 7};
    int K = 150000;
    int replicates = 10;
    int grid = 141;
    double lo = -1.5;
    double hi = 2.0;
    SamplerSettings sampler{.steps = 100000};
    int M = 1;
    void validate() const;
};
void to_json(nlohmann::json& j, const ToyStudyConfig& c);
void from_json(const nlohmann::json& j, ToyStudyConfig& c);

/// Pipeline options of one toy replicate: joint (T, S) maps of one degree.
PipelineOptions toy_pipeline_options(const ToyStudyConfig& cfg, int degree, std::uint64_t seed);

/// KL(exact posterior || KDE of the samples) on the study grid.
double toy_kl(const ToyStudyConfig& cfg, const Eigen::MatrixXd& samples);

struct ToyReplicate {
    int degree = 0;
    int replicate = 0;
    std::uint64_t seed = 0;
    double kl = 0.0;
    double seconds = 0.0;
};

struct KlSummary {
    int degree = 0;
    double mean = 0.0;
    double std_error = 0.0;
};

/// Per-degree mean KL and its standard error, in the order of `degrees`.
std::vector<KlSummary> summarize_kl(const std::vector<ToyReplicate>& runs, const std::vector<int>& degrees);
/// Mean KL nonincreasing from each degree to the next, allowing one standard
/// error of slack (the larger of the two neighbours').
bool kl_monotone_within_se(const std::vector<KlSummary>& summary);

// --------------------------------------------------------- quantile bias

/// |q_a(x) - q_b(x)| for every level (rows) and selected column (cols).
Eigen::MatrixXd quantile_bias(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const std::vector<int>& columns,
                              const std::vector<double>& levels);

// ------------------------------------------------------ variance study

struct VarianceStudyConfig {
    std::vector<int> N{1000, 10000};
    std::vector<int> M{1, 5};
    int replicates = 30;
    int column = 0; // estimator: posterior mean of this fine column
};

/// With the maps fixed, reruns chain + prolongation per replicate and
/// measures the variance of the posterior-mean estimator.
std::vector<VarianceMeasurement> run_variance_study(const MultiscaleProblem& problem, const MapBundle& maps,
                                                    const SamplerSettings& sampler, const VarianceStudyConfig& cfg,
                                                    std::uint64_t seed, int threads = 1);

// ---------------------------------------------------- coarse-map fidelity

struct BlockMomentError {
    double mean = 0.0;       // worst |Δmean| / sd
    double covariance = 0.0; // worst |Δcov_ij| / (sd_i sd_j)
    int worst_mean_element = -1;
    int worst_cov_element = -1;
};

/// Compares per-element blocks of `reference` and `candidate` samples
/// (same width, multiple of `block`), standardizing by the reference.
BlockMomentError block_moment_error(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& candidate, int block);

/// `n` samples S(L r) of a coarse map from standard normal references.
Eigen::MatrixXd sample_coarse_map(const CoarseMap& map, int n, std::uint64_t seed);

// ------------------------------------------------------------- fields

/// Lag-one semivariogram: half the mean squared difference of horizontally
/// and vertically adjacent fine cells, pooled over all rows of `fields`.
double lag1_variogram(const Eigen::MatrixXd& fields, const GridGeometry& geom);

/// Reorders parameter vectors (element-by-element numbering) into row-major
/// fine-grid order, one row per field.
Eigen::MatrixXd to_grid_order(const Eigen::MatrixXd& fields, const GridGeometry& geom);

} // namespace mstm
