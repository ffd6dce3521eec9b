#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mstm/error.hpp"
#include "mstm/msfem.hpp"
#include "mstm/prior.hpp"

using namespace mstm;

TEST_CASE("1d upscaling") {
    const auto g = GridGeometry::line(3, 4);
    const Eigen::VectorXd theta = Eigen::VectorXd::Constant(12, std::log(2.5));
    const Eigen::VectorXd e = elemental_integrals_1d(theta, g);
    for (int c = 0; c < 3; ++c) CHECK(e[c] == doctest::Approx(2.5 / (1.0 / 3.0)));

    // two cells of width 0.05 with kappa (1, 3)
    const auto g2 = GridGeometry::line(10, 2);
    Eigen::VectorXd t2 = Eigen::VectorXd::Zero(20);
    t2[1] = std::log(3.0);
    CHECK(elemental_integrals_1d(t2, g2)[0] == doctest::Approx(15.0));

    // local-solve oracle: flux through one element held at heads 0 and 1
    Rng rng(2);
    const GaussianFieldPrior prior(GridGeometry::line(1, 10), 1.0, 0.1);
    for (int t = 0; t < 10; ++t) {
        const Eigen::VectorXd th = prior.sample_one(rng);
        const Eigen::VectorXd u = fine_fem_solve_1d(th, prior.geometry(), 0.0, 1.0);
        const double flux = std::exp(th[0]) * (u[1] - u[0]) / prior.geometry().fine_h();
        const double e1 = elemental_integrals_1d(th, prior.geometry())[0];
        CHECK(std::abs(flux - e1) <= 1e-12 * e1);
        // monotone in every cell
        Eigen::VectorXd up = th;
        up[t] += 0.1;
        CHECK(elemental_integrals_1d(up, prior.geometry())[0] > e1);
    }
}

TEST_CASE("1d coarse solve") {
    const Eigen::VectorXd u = solve_coarse_1d(Eigen::VectorXd::Constant(4, std::log(3.0)), 0.0, 1.0);
    for (int i = 0; i <= 4; ++i) CHECK(u[i] == doctest::Approx(i / 4.0));
    Eigen::Vector2d gamma(std::log(15.0), std::log(5.0));
    CHECK(solve_coarse_1d(gamma, 0.0, 1.0)[1] == doctest::Approx(0.25));
    CHECK_THROWS_AS(solve_coarse_1d(Eigen::VectorXd::Constant(3, -1e5), 0.0, 1.0), Error);
}

TEST_CASE("1d nodal exactness") {
    const GaussianFieldPrior prior(GridGeometry::line(10, 10), 1.0, 0.1);
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        const Eigen::VectorXd th = prior.sample_one(rng);
        const Eigen::VectorXd coarse = solve_coarse_1d(upscale_1d(th, prior.geometry()), 0.0, 1.0);
        const Eigen::VectorXd fine = fine_fem_solve_1d(th, prior.geometry(), 0.0, 1.0);
        for (int n = 0; n <= 10; ++n) CHECK(std::abs(coarse[n] - fine[10 * n]) <= 1e-10);
    }
}

TEST_CASE("1d fine solver converges at second order") {
    auto l2_error = [](int cells) {
        const auto g = GridGeometry::line(1, cells);
        const Eigen::VectorXd u =
            fine_fem_solve_1d(Eigen::VectorXd::Zero(cells), g, 0.0, 0.0, [](double x) { return M_PI * M_PI * std::sin(M_PI * x); });
        const double h = 1.0 / cells;
        double err = 0.0;
        for (int j = 0; j < cells; ++j)
            for (double s : {0.1127016653792583, 0.5, 0.8872983346207417}) {
                const double w = (s == 0.5 ? 8.0 : 5.0) / 18.0;
                const double uh = u[j] * (1 - s) + u[j + 1] * s;
                err += w * h * std::pow(uh - std::sin(M_PI * (j + s) * h), 2);
            }
        return std::sqrt(err);
    };
    const double ratio = l2_error(20) / l2_error(40);
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.075));

    const Eigen::VectorXd lin = fine_fem_solve_1d(Eigen::VectorXd::Constant(8, 0.3), GridGeometry::line(2, 4), 1.0, 3.0);
    for (int n = 0; n <= 8; ++n) CHECK(lin[n] == doctest::Approx(1.0 + 2.0 * n / 8.0).epsilon(1e-12));
}

TEST_CASE("2d msfem elemental matrices") {
    const Eigen::Matrix4d ref = bilinear_stiffness(0.25, 0.25);
    CHECK((ref.rowwise().sum()).cwiseAbs().maxCoeff() <= 1e-14);
    const Eigen::Matrix4d E = msfem_element_matrix(Eigen::VectorXd::Constant(49, std::log(2.0)), 7, 0.25);
    CHECK((E - 2.0 * ref).cwiseAbs().maxCoeff() <= 1e-10);

    const GaussianFieldPrior prior(GridGeometry::square(1, 7), 1.0, 0.1);
    Rng rng(4);
    for (int t = 0; t < 10; ++t) {
        const Eigen::Matrix4d M = msfem_element_matrix(prior.sample_one(rng), 7, 1.0);
        CHECK((M - M.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(M.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-10 * M.diagonal().maxCoeff());
        CHECK(Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(M).eigenvalues().minCoeff() >= -1e-10);
        CHECK((unpack_symmetric(pack_symmetric(M)) - M).norm() == 0.0);
    }
}

TEST_CASE("2d reduction to six degrees of freedom") {
    const auto g = GridGeometry::square(2, 5);
    const GaussianFieldPrior prior(g, 1.0, 0.1);
    Rng rng(5);
    Eigen::MatrixXd packed(4 * 300, 10);
    for (int k = 0; k < 300; ++k) packed.middleRows(4 * k, 4) = elemental_integrals_2d(prior.sample_one(rng), g);
    const auto basis = reduce_elemental_2d(packed);
    CHECK(basis.rank_ratio <= 1e-6);
    CHECK_FALSE(basis.rank_surprise);
    CHECK((basis.basis.transpose() * basis.basis - Eigen::Matrix<double, 6, 6>::Identity()).norm() <= 1e-10);
    CHECK((basis.reconstruct(basis.project(basis.mean)) - basis.mean).norm() <= 1e-10);
    for (int k = 0; k < 20; ++k) {
        const Eigen::MatrixXd held = elemental_integrals_2d(prior.sample_one(rng), g);
        for (int e = 0; e < 4; ++e) {
            const Eigen::Matrix<double, 10, 1> v = held.row(e).transpose();
            CHECK((basis.reconstruct(basis.project(v)) - v).norm() <= 1e-6 * v.norm());
        }
    }
    nlohmann::json j = basis;
    const auto back = j.get<ReducedBasis2D>();
    CHECK((back.basis - basis.basis).norm() == 0.0);
    CHECK_THROWS_AS(reduce_elemental_2d(packed.topRows(3)), Error);
}

namespace {

ReducedBasis2D basis_for(const GridGeometry& g, int draws, std::uint64_t seed) {
    const GaussianFieldPrior prior(g, 1.0, 0.1);
    Rng rng(seed);
    Eigen::MatrixXd packed(g.coarse_count() * draws, 10);
    for (int k = 0; k < draws; ++k)
        packed.middleRows(g.coarse_count() * k, g.coarse_count()) = elemental_integrals_2d(prior.sample_one(rng), g);
    return reduce_elemental_2d(packed);
}

} // namespace

TEST_CASE("2d fine and coarse solvers") {
    const auto g = GridGeometry::square(4, 7);
    const auto basis = basis_for(g, 50, 6);
    const CoarseModel2D model(g, basis);
    CHECK(model.coarse_dim() == 96);
    CHECK(model.observation_count() == 15);

    // constant kappa: MsFEM equals bilinear FEM on the coarse grid
    const Eigen::VectorXd flat = Eigen::VectorXd::Constant(g.fine_count(), 0.4);
    const Eigen::VectorXd gamma = upscale_2d(flat, g, basis);
    const auto coarse_grid = GridGeometry::square(4, 1);
    const Eigen::VectorXd q1 = fine_fem_solve_2d(Eigen::VectorXd::Constant(16, 0.4), coarse_grid);
    const Eigen::VectorXd ms = model.solve(gamma);
    CHECK((ms - q1).cwiseAbs().maxCoeff() <= 1e-10);
    const Eigen::MatrixXd K = model.stiffness(gamma);
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

    // maximum principle of the fine solver
    const GaussianFieldPrior prior(g, 1.0, 0.1);
    Rng rng(7);
    std::vector<double> errors;
    for (int t = 0; t < 41; ++t) {
        const Eigen::VectorXd th = prior.sample_one(rng);
        const Eigen::VectorXd fine = fine_fem_solve_2d(th, g);
        CHECK(fine.minCoeff() >= -1e-12);
        CHECK(fine.maxCoeff() <= 1.0 + 1e-12);
        const Eigen::VectorXd c = model.solve(upscale_2d(th, g, basis));
        Eigen::VectorXd ref(c.size());
        for (int n = 0; n < c.size(); ++n) ref[n] = fine[coarse_to_fine_node_2d(g, n)];
        errors.push_back((c - ref).norm() / ref.norm());
    }
    // Linear edge conditions leave an O(fine/coarse) boundary-layer error, so
    // the error sits around 2% for a typical draw, not below it for every draw.
    std::sort(errors.begin(), errors.end());
    MESSAGE("MsFEM relative nodal error: median " << errors[20] << ", max " << errors.back());
    CHECK(errors[20] <= 0.025);
    CHECK(errors.back() <= 0.1);
}

TEST_CASE("coarse likelihood gradients") {
    SUBCASE("1d") {
        const auto g = GridGeometry::line(10, 10);
        const CoarseModel1D model(g, 0.0, 1.0);
        Rng rng(8);
        const Eigen::VectorXd gamma = 2.0 + 0.5 * rng.normal_vector(10).array();
        const Eigen::VectorXd data = model.observe(gamma);
        CHECK(model.log_likelihood_gradient(gamma, data, 1e-4).norm() <= 1e-10 * 1e4);
        const Eigen::VectorXd g2 = gamma + 0.3 * rng.normal_vector(10);
        const Eigen::VectorXd grad = model.log_likelihood_gradient(g2, data, 1e-4);
        const Eigen::MatrixXd J = model.observation_jacobian(g2);
        for (int k = 0; k < 10; ++k) {
            Eigen::VectorXd e = Eigen::VectorXd::Zero(10);
            e[k] = 1e-6;
            const double fd = (model.log_likelihood(g2 + e, data, 1e-4) - model.log_likelihood(g2 - e, data, 1e-4)) / 2e-6;
            CHECK(std::abs(fd - grad[k]) <= 1e-5 * std::max(1.0, std::abs(grad[k])));
            const Eigen::VectorXd fdj = (model.observe(g2 + e) - model.observe(g2 - e)) / 2e-6;
            CHECK((fdj - J.col(k)).norm() <= 1e-6 * std::max(1.0, J.col(k).norm()));
        }
        CHECK(model.log_likelihood(g2, data, 1e-4) < model.log_likelihood(gamma, data, 1e-4));
    }
    SUBCASE("2d") {
        const auto g = GridGeometry::square(2, 4);
        const auto basis = basis_for(g, 40, 9);
        const CoarseModel2D model(g, basis);
        Rng rng(10);
        const GaussianFieldPrior prior(g, 1.0, 0.1);
        const Eigen::VectorXd gamma = upscale_2d(prior.sample_one(rng), g, basis);
        const Eigen::VectorXd data = model.observe(gamma) + 0.01 * rng.normal_vector(model.observation_count());
        const Eigen::VectorXd grad = model.log_likelihood_gradient(gamma, data, 1e-4);
        const Eigen::MatrixXd J = model.observation_jacobian(gamma);
        for (int k = 0; k < model.coarse_dim(); ++k) {
            Eigen::VectorXd e = Eigen::VectorXd::Zero(model.coarse_dim());
            e[k] = 1e-6;
            const double fd = (model.log_likelihood(gamma + e, data, 1e-4) - model.log_likelihood(gamma - e, data, 1e-4)) / 2e-6;
            CHECK(std::abs(fd - grad[k]) <= 1e-5 * std::max(1.0, std::abs(grad[k])));
            const Eigen::VectorXd fdj = (model.observe(gamma + e) - model.observe(gamma - e)) / 2e-6;
            CHECK((fdj - J.col(k)).norm() <= 1e-6 * std::max(1.0, J.col(k).norm()));
        }
    }
}

TEST_CASE("1d upscaling jacobian") {
    const auto g = GridGeometry::line(3, 4);
    Rng rng(11);
    const Eigen::VectorXd th = rng.normal_vector(12);
    const Eigen::MatrixXd J = upscale_1d_jacobian(th, g);
    for (int j = 0; j < 12; ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(12);
        e[j] = 1e-6;
        const Eigen::VectorXd fd = (upscale_1d(th + e, g) - upscale_1d(th - e, g)) / 2e-6;
        CHECK((fd - J.col(j)).norm() <= 1e-8);
    }
}
