#include <doctest.h>

#include <cmath>

#include "mstm/prior.hpp"

using namespace mstm;

TEST_CASE("exponential kernel") {
    const Eigen::Vector2d a(0.2, 0.0), b(0.25, 0.0);
    CHECK(exponential_kernel(a, a, 2.5, 0.1) == 2.5);
    CHECK(exponential_kernel(a, Eigen::Vector2d(0.3, 0.0), 1.0, 0.1) == doctest::Approx(std::exp(-1.0)));
    CHECK(exponential_kernel(a, b, 1.0, 0.1) == doctest::Approx(0.60653).epsilon(1e-5));
    // Euclidean, not separable
    CHECK(exponential_kernel({0, 0}, {0.03, 0.04}, 1.0, 0.1) == doctest::Approx(std::exp(-0.5)));
}

TEST_CASE("grid numbering groups cells by coarse element") {
    const auto g = GridGeometry::square(3, 2);
    CHECK(g.fine_count() == 36);
    for (int i = 0; i < g.fine_count(); ++i) {
        const auto [ix, iy] = g.cell_position(i);
        CHECK(g.cell_index(ix, iy) == i);
        const int element = (iy / 2) * 3 + ix / 2;
        CHECK(g.owning_element(i) == element);
    }
    const auto line = GridGeometry::line(10, 10);
    CHECK(line.cell_center(0).x() == doctest::Approx(0.005));
    CHECK(line.cell_center(99).x() == doctest::Approx(0.995));
}

TEST_CASE("prior factor and sampling") {
    const GaussianFieldPrior prior(GridGeometry::line(10, 10), 1.0, 0.1);
    CHECK((prior.factor() * prior.factor().transpose() - prior.covariance()).cwiseAbs().maxCoeff() <= 1e-10);

    Rng rng(21);
    const Eigen::MatrixXd s = prior.sample(100000, rng);
    const double var = s.col(40).array().square().mean();
    CHECK(std::abs(var - 1.0) <= 0.03);
    const double corr = (s.col(40).array() * s.col(50).array()).mean() /
                        std::sqrt(var * s.col(50).array().square().mean());
    CHECK(std::abs(corr - std::exp(-1.0)) <= 0.03);

    Rng again(21);
    CHECK(prior.sample(3, again) == s.topRows(3));

    const GaussianFieldPrior tiny(GridGeometry::line(1, 1), 1e-14, 0.1, 0.7);
    Rng r2(3);
    CHECK((tiny.sample(5, r2).array() - 0.7).abs().maxCoeff() <= 1e-6);
}

TEST_CASE("prior log density") {
    const GaussianFieldPrior prior(GridGeometry::line(2, 5), 1.3, 0.2, 0.5);
    const int d = prior.dim();
    const double at_mean = prior.logpdf(prior.mean());
    CHECK(at_mean == doctest::Approx(-0.5 * d * std::log(2 * M_PI) - prior.factor().diagonal().array().log().sum()));

    const GaussianFieldPrior single(GridGeometry::line(1, 1), 1.0, 0.1, 0.0);
    CHECK(single.logpdf(Eigen::VectorXd::Ones(1)) == doctest::Approx(single.logpdf(Eigen::VectorXd::Zero(1)) - 0.5));

    Rng rng(5);
    const Eigen::MatrixXd C = prior.covariance();
    const Eigen::MatrixXd Cinv = C.inverse();
    const double logdet = std::log(C.determinant());
    for (int t = 0; t < 5; ++t) {
        const Eigen::VectorXd x = prior.sample_one(rng);
        const Eigen::VectorXd c = x - prior.mean();
        const double brute = -0.5 * c.dot(Cinv * c) - 0.5 * logdet - 0.5 * d * std::log(2 * M_PI);
        CHECK(prior.logpdf(x) == doctest::Approx(brute).epsilon(1e-10));
        CHECK((prior.grad_logpdf(x) + Cinv * c).norm() <= 1e-8 * std::max(1.0, (Cinv * c).norm()));
    }
}
