#include "mstm/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "mstm/error.hpp"

namespace mstm {

Eigen::VectorXd linspace(double lo, double hi, int n) { return Eigen::VectorXd::LinSpaced(n, lo, hi); }

Eigen::VectorXd silverman_bandwidth(const Eigen::MatrixXd& samples) {
    const Eigen::Index n = samples.rows(), d = samples.cols();
    if (n == 0) throw Error(ErrorCode::EmptySampleSet, "bandwidth of an empty sample set");
    const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
    Eigen::VectorXd h(d);
    for (Eigen::Index c = 0; c < d; ++c) {
        const double m = samples.col(c).mean();
        const double sd = n > 1 ? std::sqrt((samples.col(c).array() - m).square().sum() / (n - 1)) : 1.0;
        h[c] = (sd > 0.0 ? sd : 1.0) * factor;
    }
    return h;
}

namespace {

// K(a, k) = phi_h(grid[a] - x_k), evaluated for one block of samples.
Eigen::MatrixXd kernel_block(const Eigen::VectorXd& grid, const Eigen::Ref<const Eigen::VectorXd>& x, double h) {
    const double norm = 1.0 / (std::sqrt(2.0 * M_PI) * h);
    Eigen::MatrixXd K(grid.size(), x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k)
        K.col(k) = norm * (-0.5 * ((grid.array() - x[k]) / h).square()).exp();
    return K;
}

} // namespace

Eigen::MatrixXd kde_2d(const Eigen::MatrixXd& samples, const Eigen::VectorXd& gx, const Eigen::VectorXd& gy,
                       const Eigen::Vector2d& bw) {
    if (samples.rows() == 0) throw Error(ErrorCode::EmptySampleSet, "KDE of an empty sample set");
    require(samples.cols() == 2, ErrorCode::DimensionMismatch, "2D KDE needs two columns");
    require(bw[0] > 0.0 && bw[1] > 0.0, ErrorCode::Config, "KDE bandwidth must be positive");
    Eigen::MatrixXd density = Eigen::MatrixXd::Zero(gx.size(), gy.size());
    const Eigen::Index block = 4096;
    for (Eigen::Index start = 0; start < samples.rows(); start += block) {
        const Eigen::Index len = std::min(block, samples.rows() - start);
        const Eigen::MatrixXd kx = kernel_block(gx, samples.col(0).segment(start, len), bw[0]);
        const Eigen::MatrixXd ky = kernel_block(gy, samples.col(1).segment(start, len), bw[1]);
        density.noalias() += kx * ky.transpose();
    }
    return density / double(samples.rows());
}

Eigen::MatrixXd kde_2d(const Eigen::MatrixXd& samples, const Eigen::VectorXd& gx, const Eigen::VectorXd& gy) {
    return kde_2d(samples, gx, gy, silverman_bandwidth(samples));
}

double kl_on_grid(const Eigen::MatrixXd& exact_log, const Eigen::MatrixXd& kde, double cell_area) {
    require(exact_log.rows() == kde.rows() && exact_log.cols() == kde.cols(), ErrorCode::DimensionMismatch,
            "density grids differ in shape");
    const Eigen::Index nx = kde.rows(), ny = kde.cols();
    Eigen::MatrixXd w = Eigen::MatrixXd::Constant(nx, ny, cell_area);
    w.row(0) *= 0.5;
    w.row(nx - 1) *= 0.5;
    w.col(0) *= 0.5;
    w.col(ny - 1) *= 0.5;
    const double shift = exact_log.maxCoeff();
    const Eigen::ArrayXXd p = (exact_log.array() - shift).exp();
    const double zp = (w.array() * p).sum();
    const Eigen::ArrayXXd q = kde.array().max(1e-300);
    const double zq = (w.array() * q).sum();
    const Eigen::ArrayXXd logp = exact_log.array() - shift - std::log(zp);
    const Eigen::ArrayXXd logq = q.log() - std::log(zq);
    return (w.array() * (p / zp) * (logp - logq)).sum();
}

Eigen::MatrixXd quantiles(const Eigen::MatrixXd& samples, const std::vector<double>& levels) {
    if (samples.rows() == 0) throw Error(ErrorCode::EmptySampleSet, "quantiles of an empty sample set");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        require(levels[i] >= 0.0 && levels[i] <= 1.0, ErrorCode::Config, "quantile levels must lie in [0,1]");
        require(i == 0 || levels[i] >= levels[i - 1], ErrorCode::Config, "quantile levels must be sorted");
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(levels.size()), samples.cols());
    std::vector<double> col(static_cast<std::size_t>(samples.rows()));
    const double n1 = double(samples.rows() - 1);
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
        for (Eigen::Index r = 0; r < samples.rows(); ++r) col[static_cast<std::size_t>(r)] = samples(r, c);
        std::sort(col.begin(), col.end());
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const double pos = levels[i] * n1;
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, col.size() - 1);
            const double frac = pos - double(lo);
            out(static_cast<Eigen::Index>(i), c) = col[lo] + frac * (col[hi] - col[lo]);
        }
    }
    return out;
}

Eigen::RowVectorXd column_variance(const Eigen::MatrixXd& s) {
    require(s.rows() >= 2, ErrorCode::EmptySampleSet, "variance needs two rows");
    const Eigen::MatrixXd c = s.rowwise() - s.colwise().mean();
    return c.array().square().colwise().sum() / double(s.rows() - 1);
}

} // namespace mstm
