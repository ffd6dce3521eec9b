#pragma once

// MCMC samplers (DRAM, preconditioned MALA), MAP search and ESS estimates.

#include <functional>

#include <Eigen/Dense>
#include <json.hpp>

namespace mstm {

struct TargetDensity {
    int dim = 0;
    std::function<double(const Eigen::VectorXd&)> logpdf;
    /// Optional: returns log density and writes its gradient.
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)> logpdf_grad;

    bool has_gradient() const { return static_cast<bool>(logpdf_grad); }
};

struct ChainConfig {
    int steps = 10000;
    int burn_in = -1; // -1: 20% of steps
    std::uint64_t seed = 1;
    std::uint64_t stream = 0;
    Eigen::VectorXd start;          // empty: zero vector
    Eigen::MatrixXd preconditioner; // empty: identity; DRAM initial proposal covariance / MALA P
    double proposal_scale = 1.0;    // DRAM multiplier on the proposal covariance
    double step_size = 1.0;         // preMALA epsilon
    bool tune = true;               // stochastic-approximation scale tuning during burn-in
    double target_acceptance = -1.0; // -1: 0.35 for DRAM, 0.55 for preMALA
    bool adapt = true;               // DRAM covariance adaptation from chain history
    int adapt_interval = 100;
    int dr_stages = 2;
    double dr_scale = 0.2;
    int dr_disable_after = -1; // stage 2 off after this many steps (-1: never)
    int thin = 1;

    int effective_burn_in() const { return burn_in >= 0 ? burn_in : steps / 5; }
    void validate(int dim) const;
};

struct ChainResult {
    Eigen::MatrixXd samples; // post burn-in rows
    double acceptance_rate = 0.0;
    Eigen::VectorXd ess;
    double ess_min = 0.0;
    double ess_max = 0.0;
    double wall_seconds = 0.0;
    double final_scale = 0.0; // tuned DRAM multiplier or preMALA step size
    long long evaluations = 0;
};

void to_json(nlohmann::json& j, const ChainResult& r); // metadata only

ChainResult dram_run(const TargetDensity& target, const ChainConfig& config);
ChainResult premala_run(const TargetDensity& target, const ChainConfig& config);

/// log of the preMALA Metropolis-Hastings ratio for the move x -> y.
double premala_log_ratio(const TargetDensity& target, const Eigen::MatrixXd& preconditioner, double step,
                         const Eigen::VectorXd& x, const Eigen::VectorXd& y);

struct MapOptions {
    double gradient_tolerance = 1e-6;
    int max_iterations = 200;
    double armijo_c = 1e-4;
    int max_halvings = 50;
};

struct MapResult {
    Eigen::VectorXd point;
    Eigen::MatrixXd hessian; // negative Hessian of the log density (Gauss-Newton when supplied)
    double logpdf = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
};

/// Line-searched Newton ascent. `neg_hessian` supplies a Gauss-Newton
/// approximation; when empty, finite differences of the gradient are used
/// (step 1e-6 (1 + |x_i|)).
MapResult find_map(const TargetDensity& target, const Eigen::VectorXd& start,
                   const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& neg_hessian = {},
                   const MapOptions& options = {});

/// Finite-difference negative Hessian from gradients.
Eigen::MatrixXd finite_difference_neg_hessian(const TargetDensity& target, const Eigen::VectorXd& x);

/// Per-column ESS by Geyer's initial positive (monotone) sequence.
Eigen::VectorXd ess_autocorrelation(const Eigen::MatrixXd& chain);
/// Var(target) / Var(estimator) from independent estimator replicates.
double ess_variance_ratio(const Eigen::VectorXd& estimator_replicates, double target_variance);

} // namespace mstm
