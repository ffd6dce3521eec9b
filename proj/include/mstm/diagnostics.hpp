#pragma once

// Posterior summaries: product-kernel KDE on tensor grids, grid KL
// divergence against an exact density, empirical quantiles.

#include <vector>

#include <Eigen/Dense>

namespace mstm {

/// Uniformly spaced points lo..hi inclusive.
Eigen::VectorXd linspace(double lo, double hi, int n);

/// Silverman's rule per coordinate: sd_k (4 / ((d + 2) n))^(1 / (d + 4)).
Eigen::VectorXd silverman_bandwidth(const Eigen::MatrixXd& samples);

/// Gaussian product-kernel density of 2-column samples on grid_x x grid_y;
/// entry (a, b) is the density at (grid_x[a], grid_y[b]).
Eigen::MatrixXd kde_2d(const Eigen::MatrixXd& samples, const Eigen::VectorXd& grid_x, const Eigen::VectorXd& grid_y,
                       const Eigen::Vector2d& bandwidth);
Eigen::MatrixXd kde_2d(const Eigen::MatrixXd& samples, const Eigen::VectorXd& grid_x, const Eigen::VectorXd& grid_y);

/// KL(exact || kde) on a uniform tensor grid with trapezoid weights. Both
/// densities are normalised on the grid; kde values are floored at 1e-300.
double kl_on_grid(const Eigen::MatrixXd& exact_logdensity, const Eigen::MatrixXd& kde, double cell_area);

/// Per-column empirical quantiles (linear interpolation between order
/// statistics). Result: levels.size() x cols.
Eigen::MatrixXd quantiles(const Eigen::MatrixXd& samples, const std::vector<double>& levels);

/// Mean and unbiased variance of the columns.
Eigen::RowVectorXd column_variance(const Eigen::MatrixXd& samples);

} // namespace mstm
