#pragma once

// Lower-triangular transport maps built from samples.
//
// A TriangularMap T pushes a target distribution forward to the standard
// normal reference, component by component: T_i depends on x_1..x_i only and
// is increasing in x_i. Maps are built by minimizing the sample average of
// -log dT_i/dx_i subject to zero sample mean, unit sample variance and a
// lower bound on the diagonal derivative at every training sample. The
// reference-to-target direction is obtained by least-squares regression on
// (T(x), x) pairs or by pointwise one-dimensional root finding.

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mstm/basis.hpp"

namespace mstm {

/// One output of a triangular map: sum_j alpha_j psi_j(z) with the inputs
/// standardized per coordinate as z_k = (x_k - input_shift_k) / input_scale_k.
struct MapComponent {
    MultiIndexSet index_set;
    Eigen::VectorXd coefficients;
    Eigen::VectorXd input_shift; // length index_set.dim()
    Eigen::VectorXd input_scale; // length index_set.dim(), all > 0

    MapComponent() = default;
    /// Component with identity input standardization.
    MapComponent(MultiIndexSet set, Eigen::VectorXd coeffs);
    MapComponent(MultiIndexSet set, Eigen::VectorXd coeffs, Eigen::VectorXd shift, Eigen::VectorXd scale);

    int input_dim() const { return index_set.dim(); }
    double evaluate(std::span<const double> x) const;
    /// Derivative with respect to x_k (0-based).
    double partial(std::span<const double> x, int k) const;
    double diagonal_partial(std::span<const double> x) const { return partial(x, input_dim() - 1); }
    /// Values at every row of `samples`.
    Eigen::VectorXd evaluate_many(const Eigen::MatrixXd& samples) const;
    Eigen::VectorXd diagonal_partial_many(const Eigen::MatrixXd& samples) const;
    Eigen::MatrixXd standardize(const Eigen::MatrixXd& samples) const;
};

void to_json(nlohmann::json& j, const MapComponent& c);
void from_json(const nlohmann::json& j, MapComponent& c);

class TriangularMap {
public:
    TriangularMap() = default;
    /// Component i must have input dimension i+1.
    explicit TriangularMap(std::vector<MapComponent> components);

    /// Map whose component i is He_1 of its own coordinate.
    static TriangularMap identity(int dim);

    int dim() const { return static_cast<int>(components_.size()); }
    const MapComponent& component(int i) const { return components_[static_cast<std::size_t>(i)]; }
    const std::vector<MapComponent>& components() const { return components_; }

    Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const;
    /// Rows of `samples` mapped through every component.
    Eigen::MatrixXd evaluate_many(const Eigen::MatrixXd& samples) const;
    /// Outputs first..first+count-1 only; x needs first+count entries.
    Eigen::VectorXd evaluate_range(const Eigen::VectorXd& x, int first, int count) const;
    /// Lower-triangular Jacobian.
    Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const;
    /// Sum of log diagonal partials; throws NonMonotonePoint if any is <= 0.
    double logdet_jacobian(const Eigen::VectorXd& x) const;
    /// log N(T(x); 0, I) + log det grad T(x).
    double pullback_logdensity(const Eigen::VectorXd& x) const;
    /// Solves T(x) = r one coordinate at a time by bracketed root finding.
    Eigen::VectorXd invert(const Eigen::VectorXd& r, double tol = 1e-10) const;

    /// First n components, itself a triangular map on the first n inputs.
    TriangularMap head(int n) const;

private:
    std::vector<MapComponent> components_;
};

void to_json(nlohmann::json& j, const TriangularMap& m);
void from_json(const nlohmann::json& j, TriangularMap& m);

struct BuildOptions {
    double lambda_min = 1e-5;
    double initial_penalty = 10.0;
    double penalty_growth = 10.0;
    double required_shrink = 4.0; // violation must shrink by this factor or the penalty grows
    double kkt_tolerance = 1e-8;
    int max_outer_iterations = 60;
    int max_newton_iterations = 200;
    double armijo_c = 1e-4;
    int max_halvings = 60;
    int threads = 1;
};

struct ComponentDiagnostics {
    int outer_iterations = 0;
    int newton_iterations = 0;
    double kkt_residual = 0.0;
    double sample_mean = 0.0;
    double sample_variance = 0.0;
    double min_diagonal = 0.0;
};

/// Builds the map component whose diagonal coordinate is set.dim()-1 from
/// the rows of `samples` (K x D, D >= set.dim()). Inputs are standardized
/// per coordinate before optimization; the standardization is stored in the
/// returned component.
MapComponent build_component(const Eigen::MatrixXd& samples, const MultiIndexSet& set, const BuildOptions& opts,
                             ComponentDiagnostics* diagnostics = nullptr);

/// Builds every component independently; index_sets[i] must reference only
/// coordinates 0..i and have dimension i+1.
TriangularMap build_map(const Eigen::MatrixXd& samples, const std::vector<MultiIndexSet>& index_sets,
                        const BuildOptions& opts, std::vector<ComponentDiagnostics>* diagnostics = nullptr);

/// Least-squares fit of x_i on psi_j(r_1..r_i) for each component. `reference`
/// and `target` are paired rows.
TriangularMap build_inverse_regression(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& target,
                                       const std::vector<MultiIndexSet>& index_sets, int threads = 1);

/// Index sets of total degree `degree` for a dim-dimensional triangular map.
std::vector<MultiIndexSet> total_degree_sets(int dim, int degree);

/// Gaussian conditional map theta = mean + gain r_c + noise_factor r_f.
struct LinearConditionalMap {
    Eigen::VectorXd mean;
    Eigen::MatrixXd gain;         // d_theta x d_c
    Eigen::MatrixXd noise_factor; // d_theta x d_theta, symmetric
    double clipped_fraction = 0.0;
    bool clipped_warning = false; // clipping exceeded 1e-6 of the trace

    int coarse_dim() const { return static_cast<int>(gain.cols()); }
    int fine_dim() const { return static_cast<int>(mean.size()); }
    Eigen::VectorXd evaluate(const Eigen::VectorXd& coarse_ref, const Eigen::VectorXd& fine_ref) const;
    Eigen::MatrixXd conditional_covariance() const { return noise_factor * noise_factor.transpose(); }
};

/// Uses the empirical cross-covariance between reference coarse samples and
/// prior fine samples; the conditional covariance square root comes from a
/// symmetric eigendecomposition with negative eigenvalues clipped at zero.
LinearConditionalMap cross_covariance_map(const Eigen::MatrixXd& theta_samples, const Eigen::MatrixXd& rc_samples,
                                          const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov);

/// Reference <-> coarse parameter transformation used by coarse inference.
class CoarseMap {
public:
    virtual ~CoarseMap() = default;
    virtual int dim() const = 0;
    /// gamma = S_c(r_c)
    virtual Eigen::VectorXd to_coarse(const Eigen::VectorXd& reference) const = 0;
    virtual Eigen::MatrixXd to_coarse_jacobian(const Eigen::VectorXd& reference) const = 0;
    /// r_c = T_c(gamma)
    virtual Eigen::VectorXd to_reference(const Eigen::VectorXd& coarse) const = 0;
    virtual Eigen::MatrixXd to_reference_many(const Eigen::MatrixXd& coarse) const;
};

/// Coarse map given by a forward map T_c and its regression inverse S_c.
class TriangularCoarseMap final : public CoarseMap {
public:
    TriangularCoarseMap(TriangularMap forward, TriangularMap inverse);

    int dim() const override { return forward_.dim(); }
    Eigen::VectorXd to_coarse(const Eigen::VectorXd& reference) const override { return inverse_.evaluate(reference); }
    Eigen::MatrixXd to_coarse_jacobian(const Eigen::VectorXd& reference) const override {
        return inverse_.jacobian(reference);
    }
    Eigen::VectorXd to_reference(const Eigen::VectorXd& coarse) const override { return forward_.evaluate(coarse); }
    Eigen::MatrixXd to_reference_many(const Eigen::MatrixXd& coarse) const override {
        return forward_.evaluate_many(coarse);
    }

    const TriangularMap& forward() const { return forward_; }
    const TriangularMap& inverse() const { return inverse_; }

private:
    TriangularMap forward_;
    TriangularMap inverse_;
};

/// Coarse map for stationary priors: one shared nonlinear map on the per-element
/// block plus a block lower-triangular Cholesky factor coupling elements.
class StationaryCoarseMap final : public CoarseMap {
public:
    StationaryCoarseMap(TriangularMap marginal_forward, TriangularMap marginal_inverse, Eigen::MatrixXd cholesky_factor);

    int dim() const override { return static_cast<int>(cholesky_.rows()); }
    int block_dim() const { return marginal_forward_.dim(); }
    int element_count() const { return dim() / block_dim(); }

    Eigen::VectorXd to_coarse(const Eigen::VectorXd& reference) const override;
    Eigen::MatrixXd to_coarse_jacobian(const Eigen::VectorXd& reference) const override;
    Eigen::VectorXd to_reference(const Eigen::VectorXd& coarse) const override;
    Eigen::MatrixXd to_reference_many(const Eigen::MatrixXd& coarse) const override;
    /// Per-element blocks T^m(gamma_e) stacked, before decorrelation.
    Eigen::VectorXd marginal_reference(const Eigen::VectorXd& coarse) const;
    /// to_coarse using pointwise inversion of the marginal forward map instead of its regression inverse.
    Eigen::VectorXd to_coarse_exact(const Eigen::VectorXd& reference, double tol = 1e-12) const;

    const TriangularMap& marginal_forward() const { return marginal_forward_; }
    const TriangularMap& marginal_inverse() const { return marginal_inverse_; }
    const Eigen::MatrixXd& cholesky_factor() const { return cholesky_; }

private:
    TriangularMap marginal_forward_;
    TriangularMap marginal_inverse_;
    Eigen::MatrixXd cholesky_;
};

struct StationaryBuildOptions {
    int degree = 7;
    int inverse_degree = -1; // regression inverse degree (-1: same as forward)
    /// Cap on pooled per-element samples used to fit the shared map (0 = all).
    int max_pooled_samples = 0;
    BuildOptions build;
};

/// `element_samples` is K x (b V): element e occupies columns b e .. b e + b - 1,
/// elements in row-major coarse-grid order.
StationaryCoarseMap build_stationary_coarse_map(const Eigen::MatrixXd& element_samples, int block_dim,
                                                const StationaryBuildOptions& opts);

} // namespace mstm
