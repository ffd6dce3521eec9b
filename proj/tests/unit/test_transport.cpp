#include <doctest.h>

#include <cmath>

#include "mstm/error.hpp"
#include "mstm/rng.hpp"
#include "mstm/transport.hpp"

using namespace mstm;

namespace {

Eigen::MatrixXd normal_samples(int K, int d, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd z(K, d);
    for (int k = 0; k < K; ++k)
        for (int i = 0; i < d; ++i) z(k, i) = rng.normal();
    return z;
}

MapComponent one_d(std::initializer_list<double> coeffs) {
    Eigen::VectorXd a(static_cast<Eigen::Index>(coeffs.size()));
    int m = 0;
    for (double c : coeffs) a[m++] = c;
    return MapComponent(total_degree_set(1, static_cast<int>(coeffs.size()) - 1), a);
}

// Raw-coordinate intercept/slope of a built linear 1D component.
std::pair<double, double> affine_form(const MapComponent& c) {
    const double slope = c.coefficients[1] / c.input_scale[0];
    return {c.coefficients[0] - slope * c.input_shift[0], slope};
}

// Real root of x^3 + x - r.
double cubic_root(double r) {
    const double q = r / 2.0;
    const double disc = std::sqrt(q * q + 1.0 / 27.0);
    return std::cbrt(q + disc) + std::cbrt(q - disc);
}

} // namespace

TEST_CASE("evaluation of simple maps") {
    const auto id = TriangularMap::identity(2);
    Eigen::Vector2d x(0.3, -1.2);
    CHECK((id.evaluate(x) - x).norm() == 0.0);
    CHECK(id.logdet_jacobian(x) == 0.0);

    TriangularMap lin({one_d({0, 1, 0, 0})});
    TriangularMap cub({one_d({0, 0, 0, 1})});
    Eigen::VectorXd two(1);
    two << 2.0;
    CHECK(lin.evaluate(two)[0] == doctest::Approx(2.0));
    CHECK(cub.evaluate(two)[0] == doctest::Approx(2.0));

    std::vector<MapComponent> doubled;
    for (int i = 0; i < 3; ++i) {
        std::vector<int> e(static_cast<std::size_t>(i + 1), 0);
        e.back() = 1;
        doubled.emplace_back(MultiIndexSet(i + 1, {MultiIndex(e)}), Eigen::VectorXd::Constant(1, 2.0));
    }
    TriangularMap twice(doubled);
    CHECK(twice.logdet_jacobian(Eigen::Vector3d(0.1, 0.2, -4.0)) == doctest::Approx(3.0 * std::log(2.0)));

    // x -> x^3 + x: He_3 + 4 He_1, non-monotone nowhere.
    TriangularMap c3({one_d({0, 4, 0, 1})});
    for (double p : {-1.7, 0.0, 0.9}) {
        Eigen::VectorXd v(1);
        v << p;
        const double h = 1e-6;
        const double fd = (c3.evaluate(v + Eigen::VectorXd::Constant(1, h))[0] -
                           c3.evaluate(v - Eigen::VectorXd::Constant(1, h))[0]) /
                          (2 * h);
        CHECK(std::log(fd) == doctest::Approx(c3.logdet_jacobian(v)).epsilon(1e-6));
    }
    // non-monotone component is reported
    TriangularMap bad({one_d({0, -1})});
    CHECK_THROWS_AS(bad.logdet_jacobian(two), Error);
    CHECK_THROWS_AS(id.evaluate(Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("pullback density") {
    const auto id = TriangularMap::identity(2);
    Eigen::Vector2d x(0.5, -0.25);
    CHECK(id.pullback_logdensity(x) == doctest::Approx(-0.5 * x.squaredNorm() - std::log(2 * M_PI)));

    // r = (x - 3)/2 pulls N(0,1) back to N(3, 4)
    MapComponent c(total_degree_set(1, 1), Eigen::Vector2d(0.0, 1.0), Eigen::VectorXd::Constant(1, 3.0),
                   Eigen::VectorXd::Constant(1, 2.0));
    TriangularMap m({c});
    for (double v : {-1.0, 3.0, 7.5}) {
        const double exact = -0.5 * std::pow((v - 3.0) / 2.0, 2) - 0.5 * std::log(2 * M_PI) - std::log(2.0);
        CHECK(m.pullback_logdensity(Eigen::VectorXd::Constant(1, v)) == doctest::Approx(exact).epsilon(1e-10));
    }
}

TEST_CASE("pointwise inversion") {
    const auto id = TriangularMap::identity(2);
    Eigen::Vector2d r(0.7, -0.2);
    CHECK((id.invert(r) - r).norm() <= 1e-10);
    TriangularMap c3({one_d({0, 4, 0, 1})});
    CHECK(c3.invert(Eigen::VectorXd::Constant(1, 2.0))[0] == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("component construction on standard normal samples") {
    const auto z = normal_samples(100000, 1, 1);
    ComponentDiagnostics diag;
    const auto c = build_component(z, total_degree_set(1, 1), BuildOptions{}, &diag);
    const auto [a0, a1] = affine_form(c);
    CHECK(std::abs(a0) <= 0.02);
    CHECK(std::abs(a1 - 1.0) <= 0.02);
    CHECK(std::abs(diag.sample_mean) <= 1e-6);
    CHECK(std::abs(diag.sample_variance - 1.0) <= 1e-6);
}

TEST_CASE("affine whitening is recovered") {
    Eigen::MatrixXd x = (2.0 * normal_samples(100000, 1, 2)).array() + 3.0;
    const auto c = build_component(x, total_degree_set(1, 1), BuildOptions{});
    const auto [a0, a1] = affine_form(c);
    CHECK(a0 == doctest::Approx(-1.5).epsilon(0.02));
    CHECK(a1 == doctest::Approx(0.5).epsilon(0.02));

    // regression of the inverse is exact for affine pairs
    TriangularMap T({c});
    const Eigen::MatrixXd r = T.evaluate_many(x);
    const auto S = build_inverse_regression(r, x, total_degree_sets(1, 1));
    Eigen::VectorXd probe(1);
    probe << 0.37;
    CHECK(std::abs(S.evaluate(probe)[0] - T.invert(probe)[0]) <= 1e-8);
}

TEST_CASE("monotone cubic target") {
    const int K = 100000;
    // x solves x^3 + x = z, so the exact map is the cubic x -> x^3 + x itself
    const Eigen::MatrixXd z = normal_samples(K, 1, 3);
    const Eigen::MatrixXd x = z.unaryExpr([](double v) { return cubic_root(v); });
    std::vector<ComponentDiagnostics> diags;
    BuildOptions opts;
    const auto T = build_map(x, total_degree_sets(1, 3), opts, &diags);
    CHECK(std::abs(diags[0].sample_mean) <= 1e-6);
    CHECK(std::abs(diags[0].sample_variance - 1.0) <= 1e-6);
    CHECK(diags[0].min_diagonal >= opts.lambda_min - 1e-10);

    const Eigen::VectorXd r = T.evaluate_many(x).col(0);
    const double mean = r.mean();
    const Eigen::ArrayXd c = r.array() - mean;
    const double var = c.square().mean();
    const double skew = c.cube().mean() / std::pow(var, 1.5);
    const double kurt = c.square().square().mean() / (var * var);
    CHECK(std::abs(skew) <= 0.05);
    CHECK(std::abs(kurt - 3.0) <= 0.1);

    // regression inverse vs. the pointwise oracle on fresh draws; the inverse
    // is cube-root-like, so it gets a richer total-degree family
    const auto S = build_inverse_regression(T.evaluate_many(x), x, total_degree_sets(1, 7));
    const Eigen::MatrixXd fresh = normal_samples(2000, 1, 4);
    const Eigen::MatrixXd fx = fresh.unaryExpr([](double v) { return cubic_root(v); });
    int good = 0;
    for (int k = 0; k < fx.rows(); ++k) {
        const Eigen::VectorXd xr = fx.row(k).transpose();
        const Eigen::VectorXd rr = T.evaluate(xr);
        const double oracle = T.invert(rr)[0];
        CHECK(std::abs(oracle - xr[0]) <= 1e-8);
        if (std::abs(S.evaluate(rr)[0] - oracle) <= 0.05) ++good;
    }
    CHECK(good >= 0.95 * fx.rows());
    // map output against the analytically known reference samples
    const Eigen::ArrayXd zs = (z.col(0).array() - z.col(0).mean()) / std::sqrt((z.col(0).array() - z.col(0).mean()).square().mean());
    CHECK((T.evaluate_many(x).col(0).array() - zs).abs().maxCoeff() <= 0.05); // sampling error only
}

TEST_CASE("correlated gaussian whitening and triangularity") {
    const int K = 100000;
    const Eigen::MatrixXd z = normal_samples(K, 2, 5);
    Eigen::MatrixXd x(K, 2);
    x.col(0) = z.col(0);
    x.col(1) = 0.8 * z.col(0) + 0.6 * z.col(1);
    const auto T = build_map(x, total_degree_sets(2, 1), BuildOptions{});
    const Eigen::MatrixXd r = T.evaluate_many(x);
    const Eigen::MatrixXd rc = r.rowwise() - r.colwise().mean();
    const Eigen::MatrixXd cov = rc.transpose() * rc / double(K);
    CHECK((cov - Eigen::Matrix2d::Identity()).norm() <= 0.05);

    Eigen::Vector2d p(0.3, 0.4), q(0.3, -2.0);
    CHECK(T.component(0).evaluate(std::span<const double>(p.data(), 2)) ==
          T.component(0).evaluate(std::span<const double>(q.data(), 2)));

    // sets violating triangularity are rejected
    std::vector<MultiIndexSet> bad{total_degree_set(2, 1), total_degree_set(2, 1)};
    CHECK_THROWS_AS(build_map(x, bad, BuildOptions{}), Error);
}

TEST_CASE("construction errors") {
    const auto z = normal_samples(50, 1, 6);
    CHECK_THROWS_AS(build_component(z, total_degree_set(1, 60), BuildOptions{}), Error);
    MultiIndexSet no_linear(1, {MultiIndex({0}), MultiIndex({3})});
    try {
        build_component(z, no_linear, BuildOptions{});
        FAIL("expected InfeasibleStart");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InfeasibleStart);
    }
    CHECK_THROWS_AS(build_inverse_regression(z, z, {MultiIndexSet(1)}), Error);
    // duplicated column -> rank deficient
    Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(50, 1, 1.0);
    try {
        build_inverse_regression(flat, z, total_degree_sets(1, 2));
        FAIL("expected RankDeficient");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::RankDeficient);
    }
}

TEST_CASE("map json round trip") {
    Eigen::MatrixXd x = normal_samples(2000, 2, 8);
    x.col(1) += x.col(0).array().square().matrix();
    const auto T = build_map(x, total_degree_sets(2, 2), BuildOptions{});
    nlohmann::json j = T;
    const auto back = j.get<TriangularMap>();
    Eigen::Vector2d p(0.2, 0.9);
    CHECK((back.evaluate(p) - T.evaluate(p)).norm() == 0.0);
}

TEST_CASE("cross-covariance conditional map") {
    const int K = 100000;
    const Eigen::MatrixXd z = normal_samples(K, 3, 9);
    // r_c ~ N(0,1); theta = (0.6 r + 0.8 e1, -0.3 r + sqrt(0.91) e2)
    Eigen::MatrixXd rc = z.col(0);
    Eigen::MatrixXd th(K, 2);
    th.col(0) = 0.6 * z.col(0) + 0.8 * z.col(1);
    th.col(1) = -0.3 * z.col(0) + std::sqrt(0.91) * z.col(2);
    const Eigen::Vector2d mu(1.0, -2.0);
    th.rowwise() += mu.transpose();
    const auto m = cross_covariance_map(th, rc, mu, Eigen::Matrix2d::Identity());
    CHECK(m.gain(0, 0) == doctest::Approx(0.6).epsilon(0.02));
    CHECK(m.gain(1, 0) == doctest::Approx(-0.3).epsilon(0.02));
    Eigen::Matrix2d exact;
    exact << 0.64, 0.18, 0.18, 0.91;
    CHECK((m.conditional_covariance() - exact).cwiseAbs().maxCoeff() <= 0.02);
    CHECK((m.noise_factor - m.noise_factor.transpose()).norm() <= 1e-12);
    CHECK_FALSE(m.clipped_warning);

    // independent reference -> prior
    const auto ind = cross_covariance_map(th, z.col(2) * 0.0 + normal_samples(K, 1, 10), mu, Eigen::Matrix2d::Identity());
    CHECK(ind.gain.cwiseAbs().maxCoeff() <= 0.02);
    CHECK((ind.conditional_covariance() - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() <= 0.02);
}

TEST_CASE("stationary coarse map") {
    const int K = 20000;
    const Eigen::MatrixXd z = normal_samples(K, 4, 12);
    // two independent 2-dim elements, each (a, a^2/2 + b)
    Eigen::MatrixXd s(K, 4);
    for (int e = 0; e < 2; ++e) {
        s.col(2 * e) = z.col(2 * e);
        s.col(2 * e + 1) = 0.5 * z.col(2 * e).array().square().matrix() + z.col(2 * e + 1);
    }
    StationaryBuildOptions opts;
    opts.degree = 3;
    const auto m = build_stationary_coarse_map(s, 2, opts);
    CHECK(m.dim() == 4);
    CHECK(m.element_count() == 2);
    const Eigen::MatrixXd& L = m.cholesky_factor();
    CHECK(L.block(2, 0, 2, 2).cwiseAbs().maxCoeff() <= 0.05);
    CHECK(L.diagonal().minCoeff() > 0.0);

    const Eigen::MatrixXd r = m.to_reference_many(s);
    for (int k = 0; k < 50; ++k) {
        const Eigen::VectorXd g = s.row(k).transpose();
        CHECK((m.to_reference(g) - r.row(k).transpose()).norm() <= 1e-10);
        CHECK((m.to_coarse_exact(r.row(k).transpose()) - g).cwiseAbs().maxCoeff() <= 1e-6);
    }
    // Jacobian of the regression direction vs. finite differences
    const Eigen::VectorXd r0 = r.row(3).transpose();
    const Eigen::MatrixXd J = m.to_coarse_jacobian(r0);
    for (int j = 0; j < 4; ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(4);
        e[j] = 1e-6;
        const Eigen::VectorXd fd = (m.to_coarse(r0 + e) - m.to_coarse(r0 - e)) / 2e-6;
        CHECK((fd - J.col(j)).norm() <= 1e-5 * std::max(1.0, J.col(j).norm()));
    }
}

TEST_CASE("stationary coarse map with a pooled-sample cap") {
    const int K = 3000;
    const Eigen::MatrixXd z = normal_samples(K, 6, 13);
    Eigen::MatrixXd s(K, 6);
    for (int e = 0; e < 3; ++e) {
        s.col(2 * e) = z.col(2 * e) + 0.4 * z.col((2 * e + 2) % 6);
        s.col(2 * e + 1) = 0.5 * z.col(2 * e).array().square().matrix() + z.col(2 * e + 1);
    }
    StationaryBuildOptions opts;
    opts.degree = 2;
    opts.max_pooled_samples = 1000; // 333 whole draws of 3 elements
    const auto m = build_stationary_coarse_map(s, 2, opts);

    // coupling is the covariance of the training draws' marginal references
    const int n = 333;
    Eigen::MatrixXd rm(n, 6);
    for (int k = 0; k < n; ++k) rm.row(k) = m.marginal_reference(s.row(k).transpose()).transpose();
    const Eigen::MatrixXd c = rm.rowwise() - rm.colwise().mean();
    const Eigen::MatrixXd cov = c.transpose() * c / double(n - 1);
    const Eigen::MatrixXd LLt = m.cholesky_factor() * m.cholesky_factor().transpose();
    CHECK((LLt - cov).cwiseAbs().maxCoeff() <= 1e-10);

    opts.max_pooled_samples = 5; // fewer than two whole draws
    CHECK_THROWS_AS(build_stationary_coarse_map(s, 2, opts), Error);
}
