#include "mstm/prior.hpp"

#include <cmath>

#include "mstm/error.hpp"

namespace mstm {

GridGeometry GridGeometry::line(int coarse, int fine_per_coarse) {
    GridGeometry g{1, coarse, 1, fine_per_coarse};
    g.validate();
    return g;
}

GridGeometry GridGeometry::square(int coarse, int fine_per_coarse) {
    GridGeometry g{2, coarse, coarse, fine_per_coarse};
    g.validate();
    return g;
}

void GridGeometry::validate() const {
    require(spatial_dim == 1 || spatial_dim == 2, ErrorCode::Config, "spatial_dim must be 1 or 2");
    require(coarse_x >= 1 && coarse_y >= 1 && fine_per_coarse >= 1, ErrorCode::Config, "grid counts must be >= 1");
    require(spatial_dim == 2 || coarse_y == 1, ErrorCode::Config, "1D grids have coarse_y = 1");
}

int GridGeometry::cell_index(int ix, int iy) const {
    const int f = fine_per_coarse;
    if (spatial_dim == 1) return ix;
    const int element = (iy / f) * coarse_x + ix / f;
    return element * f * f + (iy % f) * f + ix % f;
}

std::array<int, 2> GridGeometry::cell_position(int index) const {
    const int f = fine_per_coarse;
    if (spatial_dim == 1) return {index, 0};
    const int element = index / (f * f);
    const int local = index % (f * f);
    return {(element % coarse_x) * f + local % f, (element / coarse_x) * f + local / f};
}

Eigen::Vector2d GridGeometry::cell_center(int index) const {
    const auto [ix, iy] = cell_position(index);
    const double hx = 1.0 / fine_x();
    const double hy = spatial_dim == 2 ? 1.0 / fine_y() : 0.0;
    return {(ix + 0.5) * hx, spatial_dim == 2 ? (iy + 0.5) * hy : 0.0};
}

void to_json(nlohmann::json& j, const GridGeometry& g) {
    j = nlohmann::json{{"spatial_dim", g.spatial_dim},
                       {"coarse_x", g.coarse_x},
                       {"coarse_y", g.coarse_y},
                       {"fine_per_coarse", g.fine_per_coarse}};
}

void from_json(const nlohmann::json& j, GridGeometry& g) {
    g.spatial_dim = j.value("spatial_dim", 1);
    g.coarse_x = j.value("coarse_x", j.value("coarse", 10));
    g.coarse_y = j.value("coarse_y", g.spatial_dim == 2 ? g.coarse_x : 1);
    g.fine_per_coarse = j.value("fine_per_coarse", 10);
    g.validate();
}

double exponential_kernel(const Eigen::Vector2d& a, const Eigen::Vector2d& b, double sigma2, double length) {
    return sigma2 * std::exp(-(a - b).norm() / length);
}

GaussianFieldPrior::GaussianFieldPrior(GridGeometry geometry, double sigma2, double length, double mean)
    : geometry_(geometry), sigma2_(sigma2), length_(length) {
    geometry_.validate();
    require(sigma2 > 0.0 && length > 0.0, ErrorCode::Config, "prior variance and correlation length must be positive");
    const int n = geometry_.fine_count();
    mean_ = Eigen::VectorXd::Constant(n, mean);
    std::vector<Eigen::Vector2d> centers(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) centers[static_cast<std::size_t>(i)] = geometry_.cell_center(i);
    covariance_.resize(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j)
            covariance_(i, j) = covariance_(j, i) =
                exponential_kernel(centers[static_cast<std::size_t>(i)], centers[static_cast<std::size_t>(j)], sigma2, length);
    Eigen::LLT<Eigen::MatrixXd> llt(covariance_);
    require(llt.info() == Eigen::Success, ErrorCode::CovarianceNotPD, "prior covariance is not positive definite");
    factor_ = llt.matrixL();
    log_det_half_ = factor_.diagonal().array().log().sum();
}

Eigen::MatrixXd GaussianFieldPrior::sample(int n, Rng& rng) const {
    require(n >= 0, ErrorCode::Config, "negative sample count");
    Eigen::MatrixXd z(dim(), n);
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < dim(); ++i) z(i, k) = rng.normal();
    Eigen::MatrixXd out = (factor_.triangularView<Eigen::Lower>() * z).transpose();
    out.rowwise() += mean_.transpose();
    return out;
}

Eigen::VectorXd GaussianFieldPrior::sample_one(Rng& rng) const {
    return mean_ + factor_.triangularView<Eigen::Lower>() * rng.normal_vector(dim());
}

double GaussianFieldPrior::logpdf(const Eigen::VectorXd& theta) const {
    require(theta.size() == dim(), ErrorCode::DimensionMismatch, "field dimension mismatch");
    const Eigen::VectorXd w = factor_.triangularView<Eigen::Lower>().solve(theta - mean_);
    return -0.5 * w.squaredNorm() - 0.5 * dim() * std::log(2.0 * M_PI) - log_det_half_;
}

Eigen::VectorXd GaussianFieldPrior::grad_logpdf(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd w = factor_.triangularView<Eigen::Lower>().solve(theta - mean_);
    return -factor_.transpose().triangularView<Eigen::Upper>().solve(w);
}

Eigen::MatrixXd GaussianFieldPrior::precision() const {
    const Eigen::MatrixXd linv = factor_.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(dim(), dim()));
    return linv.transpose() * linv;
}

} // namespace mstm
