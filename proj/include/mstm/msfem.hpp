#pragma once

// Multiscale finite elements for -div(kappa grad h) = f with kappa = exp(theta).
//
// The coarse parameter gamma is the elemental-integral content of each coarse
// element: log of the single 1D elemental integral, or the coordinates of the
// ten 2D Gram entries in a six-dimensional orthogonal basis.

#include <functional>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mstm/prior.hpp"

namespace mstm {

// ---------------------------------------------------------------- 1D

/// e_C = (sum_cells h_f / kappa)^-1 per coarse element.
Eigen::VectorXd elemental_integrals_1d(const Eigen::VectorXd& theta, const GridGeometry& geom);
/// gamma_C = log e_C.
Eigen::VectorXd upscale_1d(const Eigen::VectorXd& theta, const GridGeometry& geom);
/// d gamma / d theta (coarse_count x fine_count, one nonzero block per row).
Eigen::MatrixXd upscale_1d_jacobian(const Eigen::VectorXd& theta, const GridGeometry& geom);

/// Heads at all coarse nodes. `load` holds assembled nodal loads (size V+1, may be empty for f = 0).
Eigen::VectorXd solve_coarse_1d(const Eigen::VectorXd& gamma, double left, double right,
                                const Eigen::VectorXd& load = {});

/// Linear Galerkin solve on the fine grid, heads at all fine nodes. `source`
/// may be empty (f = 0); otherwise it is integrated with 3-point Gauss rules.
Eigen::VectorXd fine_fem_solve_1d(const Eigen::VectorXd& theta, const GridGeometry& geom, double left, double right,
                                  const std::function<double(double)>& source = {});

// ---------------------------------------------------------------- 2D

/// Local element stiffness of a bilinear rectangle (hx x hy) with unit
/// coefficient; nodes ordered (0,0), (1,0), (1,1), (0,1).
Eigen::Matrix4d bilinear_stiffness(double hx, double hy);

/// 4x4 MsFEM elemental matrix of one coarse element from its fine log
/// conductivities (f x f cells, row-major inside the element).
Eigen::Matrix4d msfem_element_matrix(const Eigen::VectorXd& local_theta, int fine_per_coarse, double element_size);

/// Upper-triangle packing (10 entries) of a symmetric 4x4 matrix and back.
Eigen::Matrix<double, 10, 1> pack_symmetric(const Eigen::Matrix4d& m);
Eigen::Matrix4d unpack_symmetric(const Eigen::Matrix<double, 10, 1>& v);

/// Packed elemental matrices of every coarse element: V x 10.
Eigen::MatrixXd elemental_integrals_2d(const Eigen::VectorXd& theta, const GridGeometry& geom, int threads = 1);

/// Orthogonal basis for centred elemental-integral vectors.
struct ReducedBasis2D {
    Eigen::Matrix<double, 10, 1> mean;
    Eigen::Matrix<double, 10, 6> basis;
    Eigen::Matrix<double, 10, 1> singular_values;
    double rank_ratio = 0.0;    // sigma_7 / sigma_1
    bool rank_surprise = false; // rank_ratio > 1e-6

    Eigen::Matrix<double, 6, 1> project(const Eigen::Matrix<double, 10, 1>& v) const { return basis.transpose() * (v - mean); }
    Eigen::Matrix<double, 10, 1> reconstruct(const Eigen::Matrix<double, 6, 1>& g) const { return mean + basis * g; }
};

void to_json(nlohmann::json& j, const ReducedBasis2D& b);
void from_json(const nlohmann::json& j, ReducedBasis2D& b);

/// Centred SVD of pooled packed elemental matrices (rows).
ReducedBasis2D reduce_elemental_2d(const Eigen::MatrixXd& packed_samples);

/// gamma (6 V) of one field.
Eigen::VectorXd upscale_2d(const Eigen::VectorXd& theta, const GridGeometry& geom, const ReducedBasis2D& basis,
                           int threads = 1);

/// Bilinear Galerkin solve on the fine grid with h(x,0) = x, h(x,1) = 1 - x
/// and no-flow sides; heads at all fine nodes, row-major (x fastest).
Eigen::VectorXd fine_fem_solve_2d(const Eigen::VectorXd& theta, const GridGeometry& geom,
                                  const std::function<double(double, double)>& source = {});

// ---------------------------------------------------------------- coarse systems

/// Coarse linear system assembled from per-element matrices that depend on
/// the coarse parameter. Supplies heads at observed nodes, the Gaussian
/// log-likelihood, its adjoint gradient and the observation Jacobian.
class CoarseModel {
public:
    virtual ~CoarseModel() = default;
    int coarse_dim() const { return static_cast<int>(elements_.size()) * params_per_element_; }
    int node_count() const { return node_count_; }
    const std::vector<int>& observed_nodes() const { return observed_; }
    int observation_count() const { return static_cast<int>(observed_.size()); }
    /// Coordinates of each coarse node.
    virtual Eigen::Vector2d node_location(int node) const = 0;

    Eigen::VectorXd solve(const Eigen::VectorXd& gamma) const;
    Eigen::VectorXd observe(const Eigen::VectorXd& gamma) const;
    double log_likelihood(const Eigen::VectorXd& gamma, const Eigen::VectorXd& data, double noise_var) const;
    /// Adjoint gradient of log_likelihood; also returns the value.
    Eigen::VectorXd log_likelihood_gradient(const Eigen::VectorXd& gamma, const Eigen::VectorXd& data, double noise_var,
                                            double* value = nullptr) const;
    /// d observe / d gamma.
    Eigen::MatrixXd observation_jacobian(const Eigen::VectorXd& gamma) const;
    /// Assembled global stiffness (all nodes).
    Eigen::MatrixXd stiffness(const Eigen::VectorXd& gamma) const;

protected:
    struct ElementMatrix {
        Eigen::MatrixXd value;
        std::vector<Eigen::MatrixXd> derivs; // one per element parameter
    };
    virtual ElementMatrix element_matrix(const Eigen::VectorXd& gamma_e) const = 0;

    int node_count_ = 0;
    int params_per_element_ = 1;
    std::vector<std::vector<int>> elements_;
    std::vector<std::pair<int, double>> dirichlet_;
    std::vector<int> observed_;

private:
    struct Solved;
    Solved solve_full(const Eigen::VectorXd& gamma) const;
};

/// 1D chain of coarse elements; Dirichlet at both ends, observations at interior nodes.
class CoarseModel1D final : public CoarseModel {
public:
    CoarseModel1D(const GridGeometry& geom, double left, double right);
    Eigen::Vector2d node_location(int node) const override;

private:
    ElementMatrix element_matrix(const Eigen::VectorXd& gamma_e) const override;
    GridGeometry geom_;
};

/// 2D quad mesh; h(x,0) = x, h(x,1) = 1 - x, no-flow sides, observations at all non-Dirichlet nodes.
class CoarseModel2D final : public CoarseModel {
public:
    CoarseModel2D(const GridGeometry& geom, ReducedBasis2D basis);
    Eigen::Vector2d node_location(int node) const override;
    const ReducedBasis2D& basis() const { return basis_; }

private:
    ElementMatrix element_matrix(const Eigen::VectorXd& gamma_e) const override;
    GridGeometry geom_;
    ReducedBasis2D basis_;
};

/// Fine-grid node index (row-major over fine nodes) of a coarse node.
int coarse_to_fine_node_2d(const GridGeometry& geom, int coarse_node);

} // namespace mstm
