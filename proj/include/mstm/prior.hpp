#pragma once

// Gaussian random-field priors on piecewise-constant 1D/2D grids.

#include <array>

#include <Eigen/Dense>
#include <json.hpp>

#include "mstm/rng.hpp"

namespace mstm {

/// Uniform coarse/fine grid on [0,1] or [0,1]^2.
///
/// Fine cells are numbered element by element: the cells of coarse element 0
/// first, then element 1, and so on. Coarse elements are row-major (x fastest),
/// as are the fine cells inside an element. In 1D this is plain left-to-right.
struct GridGeometry {
    int spatial_dim = 1;
    int coarse_x = 10;
    int coarse_y = 1;
    int fine_per_coarse = 10; // per axis

    static GridGeometry line(int coarse, int fine_per_coarse);
    static GridGeometry square(int coarse, int fine_per_coarse);

    void validate() const;
    int coarse_count() const { return coarse_x * (spatial_dim == 2 ? coarse_y : 1); }
    int cells_per_element() const { return spatial_dim == 2 ? fine_per_coarse * fine_per_coarse : fine_per_coarse; }
    int fine_count() const { return coarse_count() * cells_per_element(); }
    int fine_x() const { return coarse_x * fine_per_coarse; }
    int fine_y() const { return spatial_dim == 2 ? coarse_y * fine_per_coarse : 1; }
    double coarse_h() const { return 1.0 / coarse_x; }
    double fine_h() const { return 1.0 / fine_x(); }

    /// Parameter index of the fine cell at global fine position (ix, iy).
    int cell_index(int ix, int iy = 0) const;
    /// Global fine position of a parameter index.
    std::array<int, 2> cell_position(int index) const;
    Eigen::Vector2d cell_center(int index) const;
    /// Coarse element (row-major) owning a parameter index.
    int owning_element(int index) const { return index / cells_per_element(); }
};

void to_json(nlohmann::json& j, const GridGeometry& g);
void from_json(const nlohmann::json& j, GridGeometry& g);

double exponential_kernel(const Eigen::Vector2d& a, const Eigen::Vector2d& b, double sigma2, double length);

class GaussianFieldPrior {
public:
    /// Zero-mean-offset field with covariance sigma2 exp(-|x - y| / length) at cell centres.
    GaussianFieldPrior(GridGeometry geometry, double sigma2, double length, double mean = 0.0);

    const GridGeometry& geometry() const { return geometry_; }
    int dim() const { return static_cast<int>(mean_.size()); }
    double sigma2() const { return sigma2_; }
    double length() const { return length_; }
    const Eigen::VectorXd& mean() const { return mean_; }
    const Eigen::MatrixXd& covariance() const { return covariance_; }
    /// Lower Cholesky factor of covariance().
    const Eigen::MatrixXd& factor() const { return factor_; }

    /// n draws as rows.
    Eigen::MatrixXd sample(int n, Rng& rng) const;
    Eigen::VectorXd sample_one(Rng& rng) const;
    double logpdf(const Eigen::VectorXd& theta) const;
    /// Gradient of logpdf.
    Eigen::VectorXd grad_logpdf(const Eigen::VectorXd& theta) const;
    /// Precision matrix (dense).
    Eigen::MatrixXd precision() const;

private:
    GridGeometry geometry_;
    double sigma2_;
    double length_;
    Eigen::VectorXd mean_;
    Eigen::MatrixXd covariance_;
    Eigen::MatrixXd factor_;
    double log_det_half_ = 0.0;
};

} // namespace mstm
