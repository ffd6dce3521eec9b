#include "mstm/msfem.hpp"

#include <cmath>

#include <Eigen/Sparse>

#include "mstm/error.hpp"
#include "mstm/parallel.hpp"

namespace mstm {

namespace {

// Solves a symmetric tridiagonal system (diag, off) x = rhs by elimination.
Eigen::VectorXd solve_tridiagonal(Eigen::VectorXd diag, const Eigen::VectorXd& off, Eigen::VectorXd rhs) {
    const Eigen::Index n = diag.size();
    for (Eigen::Index i = 1; i < n; ++i) {
        require(diag[i - 1] != 0.0 && std::isfinite(diag[i - 1]), ErrorCode::SingularSystem, "zero pivot in tridiagonal solve");
        const double w = off[i - 1] / diag[i - 1];
        diag[i] -= w * off[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    require(n == 0 || (diag[n - 1] != 0.0 && std::isfinite(diag[n - 1])), ErrorCode::SingularSystem,
            "zero pivot in tridiagonal solve");
    Eigen::VectorXd x(n);
    for (Eigen::Index i = n - 1; i >= 0; --i) x[i] = (rhs[i] - (i + 1 < n ? off[i] * x[i + 1] : 0.0)) / diag[i];
    return x;
}

// Chain of 2-node elements with conductances c (element e joins nodes e, e+1).
Eigen::VectorXd solve_chain(const Eigen::VectorXd& c, double left, double right, const Eigen::VectorXd& load) {
    const Eigen::Index elements = c.size();
    require(elements >= 2, ErrorCode::Config, "need at least one interior node");
    const Eigen::Index interior = elements - 1;
    Eigen::VectorXd diag(interior), off(std::max<Eigen::Index>(interior - 1, 0)), rhs(interior);
    for (Eigen::Index i = 0; i < interior; ++i) {
        diag[i] = c[i] + c[i + 1];
        if (i + 1 < interior) off[i] = -c[i + 1];
        rhs[i] = load.size() ? load[i + 1] : 0.0;
    }
    rhs[0] += c[0] * left;
    rhs[interior - 1] += c[elements - 1] * right;
    Eigen::VectorXd u(elements + 1);
    u[0] = left;
    u[elements] = right;
    u.segment(1, interior) = solve_tridiagonal(diag, off, rhs);
    require(u.allFinite(), ErrorCode::SingularSystem, "non-finite heads");
    return u;
}

constexpr std::array<double, 3> kGaussNodes{-0.7745966692414834, 0.0, 0.7745966692414834};
constexpr std::array<double, 3> kGaussWeights{5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};

} // namespace

// ---------------------------------------------------------------- 1D

Eigen::VectorXd elemental_integrals_1d(const Eigen::VectorXd& theta, const GridGeometry& geom) {
    require(geom.spatial_dim == 1, ErrorCode::Config, "1D geometry required");
    require(theta.size() == geom.fine_count(), ErrorCode::DimensionMismatch, "field size differs from the fine grid");
    const int f = geom.fine_per_coarse;
    const double hf = geom.fine_h();
    Eigen::VectorXd e(geom.coarse_count());
    for (int c = 0; c < geom.coarse_count(); ++c) e[c] = 1.0 / (hf * (-theta.segment(c * f, f).array()).exp().sum());
    return e;
}

Eigen::VectorXd upscale_1d(const Eigen::VectorXd& theta, const GridGeometry& geom) {
    return elemental_integrals_1d(theta, geom).array().log();
}

Eigen::MatrixXd upscale_1d_jacobian(const Eigen::VectorXd& theta, const GridGeometry& geom) {
    const Eigen::VectorXd e = elemental_integrals_1d(theta, geom);
    const int f = geom.fine_per_coarse;
    const double hf = geom.fine_h();
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(geom.coarse_count(), geom.fine_count());
    for (int c = 0; c < geom.coarse_count(); ++c)
        for (int j = c * f; j < (c + 1) * f; ++j) J(c, j) = e[c] * hf * std::exp(-theta[j]);
    return J;
}

Eigen::VectorXd solve_coarse_1d(const Eigen::VectorXd& gamma, double left, double right, const Eigen::VectorXd& load) {
    require(load.size() == 0 || load.size() == gamma.size() + 1, ErrorCode::DimensionMismatch, "load must have one entry per coarse node");
    const Eigen::VectorXd e = gamma.array().exp();
    require((e.array() > 0.0).all() && e.allFinite(), ErrorCode::SingularSystem, "elemental integrals underflow or overflow");
    return solve_chain(e, left, right, load);
}

Eigen::VectorXd fine_fem_solve_1d(const Eigen::VectorXd& theta, const GridGeometry& geom, double left, double right,
                                  const std::function<double(double)>& source) {
    require(geom.spatial_dim == 1, ErrorCode::Config, "1D geometry required");
    require(theta.size() == geom.fine_count(), ErrorCode::DimensionMismatch, "field size differs from the fine grid");
    const int n = geom.fine_count();
    const double h = geom.fine_h();
    const Eigen::VectorXd c = theta.array().exp() / h;
    Eigen::VectorXd load;
    if (source) {
        load = Eigen::VectorXd::Zero(n + 1);
        for (int j = 0; j < n; ++j)
            for (std::size_t q = 0; q < 3; ++q) {
                const double s = 0.5 * (kGaussNodes[q] + 1.0); // local coordinate in [0,1]
                const double fx = source((j + s) * h) * kGaussWeights[q] * 0.5 * h;
                load[j] += fx * (1.0 - s);
                load[j + 1] += fx * s;
            }
    }
    return solve_chain(c, left, right, load);
}

// ---------------------------------------------------------------- 2D

Eigen::Matrix4d bilinear_stiffness(double hx, double hy) {
    Eigen::Matrix4d kxx, kyy;
    kxx << 2, -2, -1, 1, -2, 2, 1, -1, -1, 1, 2, -2, 1, -1, -2, 2;
    kyy << 2, 1, -1, -2, 1, 2, -2, -1, -1, -2, 2, 1, -2, -1, 1, 2;
    return ((hy / hx) * kxx + (hx / hy) * kyy) / 6.0;
}

Eigen::Matrix4d msfem_element_matrix(const Eigen::VectorXd& local_theta, int f, double element_size) {
    require(f >= 1 && local_theta.size() == f * f, ErrorCode::DimensionMismatch, "element patch must have f*f cells");
    const int side = f + 1;
    const int nodes = side * side;
    const double h = element_size / f;
    const Eigen::Matrix4d kref = bilinear_stiffness(h, h);
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nodes, nodes);
    for (int cy = 0; cy < f; ++cy)
        for (int cx = 0; cx < f; ++cx) {
            const double kappa = std::exp(local_theta[cy * f + cx]);
            const std::array<int, 4> idx{cy * side + cx, cy * side + cx + 1, (cy + 1) * side + cx + 1, (cy + 1) * side + cx};
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) K(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]) += kappa * kref(a, b);
        }
    std::vector<int> interior, boundary;
    for (int j = 0; j < side; ++j)
        for (int i = 0; i < side; ++i) (i == 0 || j == 0 || i == f || j == f ? boundary : interior).push_back(j * side + i);

    // Corner functions restricted to the element boundary are linear along each edge.
    Eigen::MatrixXd phi(nodes, 4);
    for (int j = 0; j < side; ++j)
        for (int i = 0; i < side; ++i) {
            const double s = double(i) / f, t = double(j) / f;
            phi.row(j * side + i) << (1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t;
        }
    if (!interior.empty()) {
        const auto ni = static_cast<Eigen::Index>(interior.size());
        const auto nb = static_cast<Eigen::Index>(boundary.size());
        Eigen::MatrixXd Kii(ni, ni), Kib(ni, nb), phib(nb, 4);
        for (Eigen::Index a = 0; a < ni; ++a) {
            for (Eigen::Index b = 0; b < ni; ++b) Kii(a, b) = K(interior[static_cast<std::size_t>(a)], interior[static_cast<std::size_t>(b)]);
            for (Eigen::Index b = 0; b < nb; ++b) Kib(a, b) = K(interior[static_cast<std::size_t>(a)], boundary[static_cast<std::size_t>(b)]);
        }
        for (Eigen::Index b = 0; b < nb; ++b) phib.row(b) = phi.row(boundary[static_cast<std::size_t>(b)]);
        Eigen::LLT<Eigen::MatrixXd> llt(Kii);
        require(llt.info() == Eigen::Success, ErrorCode::SingularSystem, "local MsFEM system is singular");
        const Eigen::MatrixXd phii = llt.solve(-Kib * phib);
        for (Eigen::Index a = 0; a < ni; ++a) phi.row(interior[static_cast<std::size_t>(a)]) = phii.row(a);
    }
    Eigen::Matrix4d E = phi.transpose() * K * phi;
    return 0.5 * (E + E.transpose());
}

Eigen::Matrix<double, 10, 1> pack_symmetric(const Eigen::Matrix4d& m) {
    Eigen::Matrix<double, 10, 1> v;
    int k = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) v[k++] = m(i, j);
    return v;
}

Eigen::Matrix4d unpack_symmetric(const Eigen::Matrix<double, 10, 1>& v) {
    Eigen::Matrix4d m;
    int k = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) m(i, j) = m(j, i) = v[k++];
    return m;
}

Eigen::MatrixXd elemental_integrals_2d(const Eigen::VectorXd& theta, const GridGeometry& geom, int threads) {
    require(geom.spatial_dim == 2, ErrorCode::Config, "2D geometry required");
    require(theta.size() == geom.fine_count(), ErrorCode::DimensionMismatch, "field size differs from the fine grid");
    const int per = geom.cells_per_element();
    Eigen::MatrixXd out(geom.coarse_count(), 10);
    parallel_for(geom.coarse_count(), threads, [&](int e) {
        out.row(e) = pack_symmetric(msfem_element_matrix(theta.segment(e * per, per), geom.fine_per_coarse, geom.coarse_h())).transpose();
    });
    return out;
}

ReducedBasis2D reduce_elemental_2d(const Eigen::MatrixXd& packed) {
    require(packed.cols() == 10, ErrorCode::DimensionMismatch, "packed elemental matrices have 10 entries");
    require(packed.rows() >= 10, ErrorCode::EmptySampleSet, "too few elemental samples for the reduction");
    ReducedBasis2D b;
    b.mean = packed.colwise().mean().transpose();
    const Eigen::MatrixXd centred = packed.rowwise() - b.mean.transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
    b.singular_values = svd.singularValues();
    b.basis = svd.matrixV().leftCols(6);
    b.rank_ratio = b.singular_values[0] > 0.0 ? b.singular_values[6] / b.singular_values[0] : 0.0;
    b.rank_surprise = b.rank_ratio > 1e-6;
    return b;
}

void to_json(nlohmann::json& j, const ReducedBasis2D& b) {
    j = nlohmann::json{{"mean", std::vector<double>(b.mean.data(), b.mean.data() + 10)},
                       {"basis_colmajor", std::vector<double>(b.basis.data(), b.basis.data() + 60)},
                       {"singular_values", std::vector<double>(b.singular_values.data(), b.singular_values.data() + 10)},
                       {"rank_ratio", b.rank_ratio},
                       {"rank_surprise", b.rank_surprise}};
}

void from_json(const nlohmann::json& j, ReducedBasis2D& b) {
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto basis = j.at("basis_colmajor").get<std::vector<double>>();
    const auto sv = j.at("singular_values").get<std::vector<double>>();
    require(mean.size() == 10 && basis.size() == 60 && sv.size() == 10, ErrorCode::Io, "malformed reduced basis");
    b.mean = Eigen::Map<const Eigen::Matrix<double, 10, 1>>(mean.data());
    b.basis = Eigen::Map<const Eigen::Matrix<double, 10, 6>>(basis.data());
    b.singular_values = Eigen::Map<const Eigen::Matrix<double, 10, 1>>(sv.data());
    b.rank_ratio = j.at("rank_ratio").get<double>();
    b.rank_surprise = j.at("rank_surprise").get<bool>();
}

Eigen::VectorXd upscale_2d(const Eigen::VectorXd& theta, const GridGeometry& geom, const ReducedBasis2D& basis, int threads) {
    const Eigen::MatrixXd packed = elemental_integrals_2d(theta, geom, threads);
    Eigen::VectorXd g(6 * geom.coarse_count());
    for (int e = 0; e < geom.coarse_count(); ++e) g.segment(6 * e, 6) = basis.project(packed.row(e).transpose());
    return g;
}

Eigen::VectorXd fine_fem_solve_2d(const Eigen::VectorXd& theta, const GridGeometry& geom,
                                  const std::function<double(double, double)>& source) {
    require(geom.spatial_dim == 2, ErrorCode::Config, "2D geometry required");
    require(theta.size() == geom.fine_count(), ErrorCode::DimensionMismatch, "field size differs from the fine grid");
    const int nx = geom.fine_x(), ny = geom.fine_y();
    const int sx = nx + 1;
    const int nodes = sx * (ny + 1);
    const double hx = 1.0 / nx, hy = 1.0 / ny;
    const Eigen::Matrix4d kref = bilinear_stiffness(hx, hy);

    auto dirichlet = [&](int node, double& value) {
        const int i = node % sx, j = node / sx;
        if (j == 0) {
            value = i * hx;
            return true;
        }
        if (j == ny) {
            value = 1.0 - i * hx;
            return true;
        }
        return false;
    };
    std::vector<int> free_index(static_cast<std::size_t>(nodes), -1);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(nodes);
    int nfree = 0;
    for (int n = 0; n < nodes; ++n) {
        double v;
        if (dirichlet(n, v))
            u[n] = v;
        else
            free_index[static_cast<std::size_t>(n)] = nfree++;
    }
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(16 * nx * ny));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nfree);
    for (int cy = 0; cy < ny; ++cy)
        for (int cx = 0; cx < nx; ++cx) {
            const double kappa = std::exp(theta[geom.cell_index(cx, cy)]);
            const std::array<int, 4> idx{cy * sx + cx, cy * sx + cx + 1, (cy + 1) * sx + cx + 1, (cy + 1) * sx + cx};
            const double load = source ? source((cx + 0.5) * hx, (cy + 0.5) * hy) * hx * hy / 4.0 : 0.0;
            for (std::size_t a = 0; a < 4; ++a) {
                const int fa = free_index[static_cast<std::size_t>(idx[a])];
                if (fa < 0) continue;
                rhs[fa] += load;
                for (std::size_t b = 0; b < 4; ++b) {
                    const double k = kappa * kref(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                    const int fb = free_index[static_cast<std::size_t>(idx[b])];
                    if (fb < 0)
                        rhs[fa] -= k * u[idx[b]];
                    else
                        trip.emplace_back(fa, fb, k);
                }
            }
        }
    Eigen::SparseMatrix<double> A(nfree, nfree);
    A.setFromTriplets(trip.begin(), trip.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
    require(solver.info() == Eigen::Success, ErrorCode::SingularSystem, "fine system factorization failed");
    const Eigen::VectorXd uf = solver.solve(rhs);
    require(solver.info() == Eigen::Success && uf.allFinite(), ErrorCode::SingularSystem, "fine system solve failed");
    for (int n = 0; n < nodes; ++n)
        if (free_index[static_cast<std::size_t>(n)] >= 0) u[n] = uf[free_index[static_cast<std::size_t>(n)]];
    return u;
}

int coarse_to_fine_node_2d(const GridGeometry& geom, int coarse_node) {
    const int cx = coarse_node % (geom.coarse_x + 1), cy = coarse_node / (geom.coarse_x + 1);
    return cy * geom.fine_per_coarse * (geom.fine_x() + 1) + cx * geom.fine_per_coarse;
}

// ---------------------------------------------------------------- coarse systems

struct CoarseModel::Solved {
    Eigen::VectorXd u;
    std::vector<int> free_index;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
    std::vector<ElementMatrix> mats;
};

Eigen::MatrixXd CoarseModel::stiffness(const Eigen::VectorXd& gamma) const {
    require(gamma.size() == coarse_dim(), ErrorCode::DimensionMismatch, "coarse parameter dimension mismatch");
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(node_count_, node_count_);
    for (std::size_t e = 0; e < elements_.size(); ++e) {
        const auto m = element_matrix(gamma.segment(static_cast<Eigen::Index>(e) * params_per_element_, params_per_element_));
        const auto& idx = elements_[e];
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = 0; b < idx.size(); ++b)
                K(idx[a], idx[b]) += m.value(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    return K;
}

CoarseModel::Solved CoarseModel::solve_full(const Eigen::VectorXd& gamma) const {
    require(gamma.size() == coarse_dim(), ErrorCode::DimensionMismatch, "coarse parameter dimension mismatch");
    require(gamma.allFinite(), ErrorCode::SingularSystem, "non-finite coarse parameter");
    Solved s;
    s.free_index.assign(static_cast<std::size_t>(node_count_), 0);
    s.u = Eigen::VectorXd::Zero(node_count_);
    for (const auto& [n, v] : dirichlet_) {
        s.free_index[static_cast<std::size_t>(n)] = -1;
        s.u[n] = v;
    }
    int nfree = 0;
    for (auto& f : s.free_index)
        if (f >= 0) f = nfree++;

    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(nfree, nfree);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nfree);
    s.mats.reserve(elements_.size());
    for (std::size_t e = 0; e < elements_.size(); ++e) {
        s.mats.push_back(element_matrix(gamma.segment(static_cast<Eigen::Index>(e) * params_per_element_, params_per_element_)));
        const auto& m = s.mats.back().value;
        const auto& idx = elements_[e];
        for (std::size_t a = 0; a < idx.size(); ++a) {
            const int fa = s.free_index[static_cast<std::size_t>(idx[a])];
            if (fa < 0) continue;
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const double k = m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                const int fb = s.free_index[static_cast<std::size_t>(idx[b])];
                if (fb < 0)
                    rhs[fa] -= k * s.u[idx[b]];
                else
                    A(fa, fb) += k;
            }
        }
    }
    require(A.allFinite(), ErrorCode::SingularSystem, "non-finite coarse stiffness");
    s.lu.compute(A);
    const double rc = s.lu.rcond();
    require(rc > 1e-14, ErrorCode::SingularSystem, "coarse stiffness is numerically singular");
    const Eigen::VectorXd uf = s.lu.solve(rhs);
    require(uf.allFinite(), ErrorCode::SingularSystem, "coarse solve produced non-finite heads");
    for (int n = 0; n < node_count_; ++n)
        if (s.free_index[static_cast<std::size_t>(n)] >= 0) s.u[n] = uf[s.free_index[static_cast<std::size_t>(n)]];
    return s;
}

Eigen::VectorXd CoarseModel::solve(const Eigen::VectorXd& gamma) const { return solve_full(gamma).u; }

Eigen::VectorXd CoarseModel::observe(const Eigen::VectorXd& gamma) const {
    const Eigen::VectorXd u = solve(gamma);
    Eigen::VectorXd out(observation_count());
    for (int k = 0; k < observation_count(); ++k) out[k] = u[observed_[static_cast<std::size_t>(k)]];
    return out;
}

double CoarseModel::log_likelihood(const Eigen::VectorXd& gamma, const Eigen::VectorXd& data, double noise_var) const {
    require(data.size() == observation_count(), ErrorCode::DimensionMismatch, "data size differs from observation count");
    return -(observe(gamma) - data).squaredNorm() / (2.0 * noise_var);
}

Eigen::VectorXd CoarseModel::log_likelihood_gradient(const Eigen::VectorXd& gamma, const Eigen::VectorXd& data,
                                                     double noise_var, double* value) const {
    require(data.size() == observation_count(), ErrorCode::DimensionMismatch, "data size differs from observation count");
    const Solved s = solve_full(gamma);
    const auto nfree = s.lu.rows();
    Eigen::VectorXd gu = Eigen::VectorXd::Zero(nfree);
    double misfit = 0.0;
    for (int k = 0; k < observation_count(); ++k) {
        const int n = observed_[static_cast<std::size_t>(k)];
        const double r = s.u[n] - data[k];
        misfit += r * r;
        gu[s.free_index[static_cast<std::size_t>(n)]] -= r / noise_var;
    }
    if (value) *value = -misfit / (2.0 * noise_var);
    const Eigen::VectorXd lf = s.lu.transpose().solve(gu);
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(node_count_);
    for (int n = 0; n < node_count_; ++n)
        if (s.free_index[static_cast<std::size_t>(n)] >= 0) lambda[n] = lf[s.free_index[static_cast<std::size_t>(n)]];

    Eigen::VectorXd grad(coarse_dim());
    for (std::size_t e = 0; e < elements_.size(); ++e) {
        const auto& idx = elements_[e];
        Eigen::VectorXd ue(static_cast<Eigen::Index>(idx.size())), le(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t a = 0; a < idx.size(); ++a) {
            ue[static_cast<Eigen::Index>(a)] = s.u[idx[a]];
            le[static_cast<Eigen::Index>(a)] = lambda[idx[a]];
        }
        for (int k = 0; k < params_per_element_; ++k)
            grad[static_cast<Eigen::Index>(e) * params_per_element_ + k] = -le.dot(s.mats[e].derivs[static_cast<std::size_t>(k)] * ue);
    }
    return grad;
}

Eigen::MatrixXd CoarseModel::observation_jacobian(const Eigen::VectorXd& gamma) const {
    const Solved s = solve_full(gamma);
    const auto nfree = s.lu.rows();
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(nfree, coarse_dim());
    for (std::size_t e = 0; e < elements_.size(); ++e) {
        const auto& idx = elements_[e];
        Eigen::VectorXd ue(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t a = 0; a < idx.size(); ++a) ue[static_cast<Eigen::Index>(a)] = s.u[idx[a]];
        for (int k = 0; k < params_per_element_; ++k) {
            const Eigen::VectorXd w = s.mats[e].derivs[static_cast<std::size_t>(k)] * ue;
            for (std::size_t a = 0; a < idx.size(); ++a) {
                const int fa = s.free_index[static_cast<std::size_t>(idx[a])];
                if (fa >= 0) W(fa, static_cast<Eigen::Index>(e) * params_per_element_ + k) -= w[static_cast<Eigen::Index>(a)];
            }
        }
    }
    const Eigen::MatrixXd du = s.lu.solve(W);
    Eigen::MatrixXd J(observation_count(), coarse_dim());
    for (int k = 0; k < observation_count(); ++k)
        J.row(k) = du.row(s.free_index[static_cast<std::size_t>(observed_[static_cast<std::size_t>(k)])]);
    return J;
}

CoarseModel1D::CoarseModel1D(const GridGeometry& geom, double left, double right) : geom_(geom) {
    require(geom.spatial_dim == 1, ErrorCode::Config, "1D geometry required");
    require(geom.coarse_count() >= 2, ErrorCode::Config, "need at least one interior coarse node");
    const int V = geom.coarse_count();
    node_count_ = V + 1;
    params_per_element_ = 1;
    for (int e = 0; e < V; ++e) elements_.push_back({e, e + 1});
    dirichlet_ = {{0, left}, {V, right}};
    for (int n = 1; n < V; ++n) observed_.push_back(n);
}

Eigen::Vector2d CoarseModel1D::node_location(int node) const { return {node * geom_.coarse_h(), 0.0}; }

CoarseModel::ElementMatrix CoarseModel1D::element_matrix(const Eigen::VectorXd& gamma_e) const {
    const double e = std::exp(gamma_e[0]);
    ElementMatrix m;
    m.value = Eigen::Matrix2d{{e, -e}, {-e, e}};
    m.derivs = {m.value};
    return m;
}

CoarseModel2D::CoarseModel2D(const GridGeometry& geom, ReducedBasis2D basis) : geom_(geom), basis_(std::move(basis)) {
    require(geom.spatial_dim == 2, ErrorCode::Config, "2D geometry required");
    const int cx = geom.coarse_x, cy = geom.coarse_y;
    const int sx = cx + 1;
    node_count_ = sx * (cy + 1);
    params_per_element_ = 6;
    for (int ey = 0; ey < cy; ++ey)
        for (int ex = 0; ex < cx; ++ex)
            elements_.push_back({ey * sx + ex, ey * sx + ex + 1, (ey + 1) * sx + ex + 1, (ey + 1) * sx + ex});
    for (int n = 0; n < node_count_; ++n) {
        const int i = n % sx, j = n / sx;
        const double x = double(i) / cx;
        if (j == 0)
            dirichlet_.emplace_back(n, x);
        else if (j == cy)
            dirichlet_.emplace_back(n, 1.0 - x);
        else
            observed_.push_back(n);
    }
}

Eigen::Vector2d CoarseModel2D::node_location(int node) const {
    const int sx = geom_.coarse_x + 1;
    return {double(node % sx) / geom_.coarse_x, double(node / sx) / geom_.coarse_y};
}

CoarseModel::ElementMatrix CoarseModel2D::element_matrix(const Eigen::VectorXd& gamma_e) const {
    ElementMatrix m;
    m.value = unpack_symmetric(basis_.reconstruct(gamma_e));
    m.derivs.reserve(6);
    for (int k = 0; k < 6; ++k) m.derivs.emplace_back(unpack_symmetric(basis_.basis.col(k)));
    return m;
}

} // namespace mstm
