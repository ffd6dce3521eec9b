#include "mstm/transport.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "mstm/error.hpp"
#include "mstm/parallel.hpp"

namespace mstm {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

struct HermiteTables {
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> derivs;
};

HermiteTables point_tables(const MultiIndexSet& set, std::span<const double> z) {
    HermiteTables t;
    t.values.resize(static_cast<std::size_t>(set.dim()));
    t.derivs.resize(static_cast<std::size_t>(set.dim()));
    for (int k = 0; k < set.dim(); ++k) {
        const auto p = static_cast<std::size_t>(set.max_degree(k));
        auto& v = t.values[static_cast<std::size_t>(k)];
        auto& d = t.derivs[static_cast<std::size_t>(k)];
        v.resize(p + 1);
        d.assign(p + 1, 0.0);
        hermite_table(z[static_cast<std::size_t>(k)], v);
        for (std::size_t n = 1; n <= p; ++n) d[n] = static_cast<double>(n) * v[n - 1];
    }
    return t;
}

} // namespace

MapComponent::MapComponent(MultiIndexSet set, Eigen::VectorXd coeffs)
    : MapComponent(set, std::move(coeffs), Eigen::VectorXd::Zero(set.dim()), Eigen::VectorXd::Ones(set.dim())) {}

MapComponent::MapComponent(MultiIndexSet set, Eigen::VectorXd coeffs, Eigen::VectorXd shift, Eigen::VectorXd scale)
    : index_set(std::move(set)), coefficients(std::move(coeffs)), input_shift(std::move(shift)),
      input_scale(std::move(scale)) {
    require(coefficients.size() == index_set.size(), ErrorCode::DimensionMismatch,
            "coefficient count differs from index-set size");
    require(input_shift.size() == index_set.dim() && input_scale.size() == index_set.dim(),
            ErrorCode::DimensionMismatch, "standardization length differs from input dimension");
    require((input_scale.array() > 0.0).all(), ErrorCode::Config, "input scales must be positive");
    require(coefficients.allFinite(), ErrorCode::Config, "map coefficients must be finite");
}

Eigen::MatrixXd MapComponent::standardize(const Eigen::MatrixXd& samples) const {
    require(samples.cols() >= input_dim(), ErrorCode::DimensionMismatch, "samples narrower than component input");
    return ((samples.leftCols(input_dim()).rowwise() - input_shift.transpose()).array().rowwise() /
            input_scale.transpose().array())
        .matrix();
}

double MapComponent::evaluate(std::span<const double> x) const {
    require(x.size() >= static_cast<std::size_t>(input_dim()), ErrorCode::DimensionMismatch, "point too short");
    std::vector<double> z(static_cast<std::size_t>(input_dim()));
    for (int k = 0; k < input_dim(); ++k) z[static_cast<std::size_t>(k)] = (x[static_cast<std::size_t>(k)] - input_shift[k]) / input_scale[k];
    return basis_row(index_set, z).dot(coefficients);
}

double MapComponent::partial(std::span<const double> x, int k) const {
    require(x.size() >= static_cast<std::size_t>(input_dim()), ErrorCode::DimensionMismatch, "point too short");
    if (k >= input_dim()) return 0.0;
    std::vector<double> z(static_cast<std::size_t>(input_dim()));
    for (int c = 0; c < input_dim(); ++c) z[static_cast<std::size_t>(c)] = (x[static_cast<std::size_t>(c)] - input_shift[c]) / input_scale[c];
    return partial_row(index_set, z, k).dot(coefficients) / input_scale[k];
}

Eigen::VectorXd MapComponent::evaluate_many(const Eigen::MatrixXd& samples) const {
    return vandermonde(index_set, standardize(samples)) * coefficients;
}

Eigen::VectorXd MapComponent::diagonal_partial_many(const Eigen::MatrixXd& samples) const {
    const int k = input_dim() - 1;
    return grad_vandermonde(index_set, standardize(samples), k) * coefficients / input_scale[k];
}

void to_json(nlohmann::json& j, const MapComponent& c) {
    j = nlohmann::json{{"index_set", c.index_set},
                       {"coefficients", std::vector<double>(c.coefficients.begin(), c.coefficients.end())},
                       {"input_shift", std::vector<double>(c.input_shift.begin(), c.input_shift.end())},
                       {"input_scale", std::vector<double>(c.input_scale.begin(), c.input_scale.end())}};
}

void from_json(const nlohmann::json& j, MapComponent& c) {
    auto set = j.at("index_set").get<MultiIndexSet>();
    const auto coeffs = j.at("coefficients").get<std::vector<double>>();
    Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()));
    Eigen::VectorXd shift = Eigen::VectorXd::Zero(set.dim());
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(set.dim());
    if (j.contains("input_shift")) {
        const auto s = j.at("input_shift").get<std::vector<double>>();
        shift = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    }
    if (j.contains("input_scale")) {
        const auto s = j.at("input_scale").get<std::vector<double>>();
        scale = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    }
    c = MapComponent(std::move(set), std::move(a), std::move(shift), std::move(scale));
}

// ---------------------------------------------------------------------------
// TriangularMap

TriangularMap::TriangularMap(std::vector<MapComponent> components) : components_(std::move(components)) {
    for (int i = 0; i < dim(); ++i) {
        const auto& c = components_[static_cast<std::size_t>(i)];
        require(c.input_dim() == i + 1, ErrorCode::DimensionMismatch,
                "component " + std::to_string(i) + " must take exactly " + std::to_string(i + 1) + " inputs");
    }
}

TriangularMap TriangularMap::identity(int dim) {
    std::vector<MapComponent> comps;
    for (int i = 0; i < dim; ++i) {
        std::vector<int> e(static_cast<std::size_t>(i + 1), 0);
        e.back() = 1;
        MultiIndexSet set(i + 1, {MultiIndex(e)});
        comps.emplace_back(set, Eigen::VectorXd::Ones(1));
    }
    return TriangularMap(std::move(comps));
}

Eigen::VectorXd TriangularMap::evaluate(const Eigen::VectorXd& x) const {
    return evaluate_range(x, 0, dim());
}

Eigen::VectorXd TriangularMap::evaluate_range(const Eigen::VectorXd& x, int first, int count) const {
    require(first >= 0 && count >= 0 && first + count <= dim(), ErrorCode::DimensionMismatch, "component range out of bounds");
    require(x.size() >= first + count, ErrorCode::DimensionMismatch, "point too short for requested components");
    require(first + count < dim() || x.size() == dim(), ErrorCode::DimensionMismatch, "point dimension differs from map dimension");
    Eigen::VectorXd out(count);
    const std::span<const double> xs(x.data(), static_cast<std::size_t>(x.size()));
    for (int i = 0; i < count; ++i) out[i] = component(first + i).evaluate(xs);
    return out;
}

Eigen::MatrixXd TriangularMap::evaluate_many(const Eigen::MatrixXd& samples) const {
    require(samples.cols() == dim(), ErrorCode::DimensionMismatch, "sample dimension differs from map dimension");
    Eigen::MatrixXd out(samples.rows(), dim());
    for (int i = 0; i < dim(); ++i) out.col(i) = component(i).evaluate_many(samples);
    return out;
}

Eigen::MatrixXd TriangularMap::jacobian(const Eigen::VectorXd& x) const {
    require(x.size() == dim(), ErrorCode::DimensionMismatch, "point dimension differs from map dimension");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(dim(), dim());
    std::vector<double> z;
    for (int i = 0; i < dim(); ++i) {
        const auto& c = component(i);
        const int d = c.input_dim();
        z.resize(static_cast<std::size_t>(d));
        for (int k = 0; k < d; ++k) z[static_cast<std::size_t>(k)] = (x[k] - c.input_shift[k]) / c.input_scale[k];
        const auto t = point_tables(c.index_set, z);
        for (int m = 0; m < c.index_set.size(); ++m) {
            const double a = c.coefficients[m];
            if (a == 0.0) continue;
            const auto& nz = c.index_set[m].nonzeros();
            for (std::size_t q = 0; q < nz.size(); ++q) {
                double v = a;
                for (std::size_t r = 0; r < nz.size(); ++r) {
                    const auto [cc, dd] = nz[r];
                    const auto ci = static_cast<std::size_t>(cc);
                    const auto di = static_cast<std::size_t>(dd);
                    v *= (r == q) ? t.derivs[ci][di] : t.values[ci][di];
                }
                J(i, nz[q].first) += v;
            }
        }
        for (int k = 0; k < d; ++k) J(i, k) /= c.input_scale[k];
    }
    return J;
}

double TriangularMap::logdet_jacobian(const Eigen::VectorXd& x) const {
    require(x.size() == dim(), ErrorCode::DimensionMismatch, "point dimension differs from map dimension");
    const std::span<const double> xs(x.data(), static_cast<std::size_t>(x.size()));
    double total = 0.0;
    for (int i = 0; i < dim(); ++i) {
        const double d = component(i).diagonal_partial(xs);
        if (!(d > 0.0))
            throw Error(ErrorCode::NonMonotonePoint,
                        "diagonal derivative of component " + std::to_string(i) + " is " + std::to_string(d));
        total += std::log(d);
    }
    return total;
}

double TriangularMap::pullback_logdensity(const Eigen::VectorXd& x) const {
    const Eigen::VectorXd r = evaluate(x);
    return -0.5 * r.squaredNorm() - 0.5 * dim() * kLogTwoPi + logdet_jacobian(x);
}

Eigen::VectorXd TriangularMap::invert(const Eigen::VectorXd& r, double tol) const {
    require(r.size() == dim(), ErrorCode::DimensionMismatch, "reference point dimension differs from map dimension");
    Eigen::VectorXd x = Eigen::VectorXd::Zero(dim());
    for (int i = 0; i < dim(); ++i) {
        const auto& c = component(i);
        auto f = [&](double t) {
            x[i] = t;
            return c.evaluate(std::span<const double>(x.data(), static_cast<std::size_t>(i + 1))) - r[i];
        };
        auto fprime = [&](double t) {
            x[i] = t;
            return c.diagonal_partial(std::span<const double>(x.data(), static_cast<std::size_t>(i + 1)));
        };
        const double center = c.input_shift[i];
        double width = c.input_scale[i];
        double lo = center - width, hi = center + width;
        double flo = f(lo), fhi = f(hi);
        int expansions = 0;
        while (flo * fhi > 0.0) {
            if (++expansions > 60)
                throw Error(ErrorCode::BracketFailure, "no sign change for component " + std::to_string(i));
            width *= 2.0;
            lo = center - width;
            hi = center + width;
            flo = f(lo);
            fhi = f(hi);
        }
        if (flo == 0.0) {
            x[i] = lo;
            continue;
        }
        if (fhi == 0.0) {
            x[i] = hi;
            continue;
        }
        // Keep the invariant f(neg) < 0 < f(pos) so either orientation works.
        double neg = flo < 0.0 ? lo : hi;
        double pos = flo < 0.0 ? hi : lo;
        double t = 0.5 * (lo + hi);
        double best_t = t, best_f = std::numeric_limits<double>::infinity();
        for (int iter = 0; iter < 200; ++iter) {
            const double ft = f(t);
            if (std::abs(ft) < best_f) {
                best_f = std::abs(ft);
                best_t = t;
            }
            if (std::abs(ft) <= tol) break;
            if (ft < 0.0)
                neg = t;
            else
                pos = t;
            const double dt = fprime(t);
            double next = (dt != 0.0) ? t - ft / dt : std::numeric_limits<double>::quiet_NaN();
            const double a = std::min(neg, pos), b = std::max(neg, pos);
            if (!(next > a && next < b)) next = 0.5 * (neg + pos);
            if (std::abs(b - a) <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t))) break;
            t = next;
        }
        x[i] = best_t;
    }
    return x;
}

TriangularMap TriangularMap::head(int n) const {
    require(n >= 0 && n <= dim(), ErrorCode::DimensionMismatch, "head larger than map");
    return TriangularMap(std::vector<MapComponent>(components_.begin(), components_.begin() + n));
}

void to_json(nlohmann::json& j, const TriangularMap& m) {
    j = nlohmann::json{{"dim", m.dim()}, {"components", m.components()}};
}

void from_json(const nlohmann::json& j, TriangularMap& m) {
    m = TriangularMap(j.at("components").get<std::vector<MapComponent>>());
    require(m.dim() == j.at("dim").get<int>(), ErrorCode::Io, "map dim field disagrees with component count");
}

std::vector<MultiIndexSet> total_degree_sets(int dim, int degree) {
    std::vector<MultiIndexSet> sets;
    for (int i = 1; i <= dim; ++i) sets.push_back(total_degree_set(i, degree));
    return sets;
}

// ---------------------------------------------------------------------------
// Constrained component construction

namespace {

// Augmented Lagrangian for
//   min  -mean(log(G a))
//   s.t. mean(A a) = 0,  a' (A'A/K) a = 1,  G a >= lambda.
// Only the columns of G whose basis functions depend on the diagonal
// coordinate are stored.
class ComponentProblem {
public:
    ComponentProblem(const Eigen::MatrixXd& A, Eigen::MatrixXd G, std::vector<int> grad_cols, double lambda)
        : G_(std::move(G)), grad_cols_(std::move(grad_cols)), lambda_(lambda), K_(static_cast<double>(A.rows())) {
        const Eigen::Index n = A.cols();
        gram_ = Eigen::MatrixXd::Zero(n, n);
        gram_.selfadjointView<Eigen::Lower>().rankUpdate(A.transpose(), 1.0 / K_);
        gram_ = gram_.selfadjointView<Eigen::Lower>();
        mean_row_ = A.colwise().mean().transpose();
        multipliers_ineq_ = Eigen::VectorXd::Zero(G_.rows());
    }

    Eigen::Index size() const { return gram_.rows(); }

    Eigen::VectorXd diag_values(const Eigen::VectorXd& a) const { return G_ * gather(a); }
    double mean_constraint(const Eigen::VectorXd& a) const { return mean_row_.dot(a); }
    double variance_constraint(const Eigen::VectorXd& a) const { return a.dot(gram_ * a) - 1.0; }

    struct Eval {
        double value = 0.0;
        Eigen::VectorXd u; // G a
    };

    // Value of the augmented Lagrangian; +inf outside the log domain.
    Eval value(const Eigen::VectorXd& a) const {
        Eval e;
        e.u = diag_values(a);
        if ((e.u.array() <= 0.0).any()) {
            e.value = std::numeric_limits<double>::infinity();
            return e;
        }
        const double c1 = mean_constraint(a);
        const double c2 = variance_constraint(a);
        double v = -e.u.array().log().mean();
        v += mu_mean_ * c1 + 0.5 * rho_ * c1 * c1;
        v += mu_var_ * c2 + 0.5 * rho_ * c2 * c2;
        const Eigen::ArrayXd s = (multipliers_ineq_.array() - rho_ * (e.u.array() - lambda_)).max(0.0);
        v += (s.square() - multipliers_ineq_.array().square()).sum() / (2.0 * rho_ * K_);
        e.value = v;
        return e;
    }

    void gradient_hessian(const Eigen::VectorXd& a, const Eigen::VectorXd& u, Eigen::VectorXd& grad,
                          Eigen::MatrixXd& hess) const {
        const Eigen::Index n = size();
        const Eigen::Index ng = G_.cols();
        const Eigen::ArrayXd inv_u = u.array().inverse();
        const Eigen::ArrayXd s = (multipliers_ineq_.array() - rho_ * (u.array() - lambda_)).max(0.0);

        // Log term and inequality penalty act on the diagonal-derivative columns only.
        const Eigen::VectorXd weights = (-inv_u - s).matrix() / K_;
        const Eigen::VectorXd grad_g = G_.transpose() * weights;
        Eigen::MatrixXd weighted = G_.array().colwise() * inv_u;
        Eigen::MatrixXd hess_g = Eigen::MatrixXd::Zero(ng, ng);
        hess_g.selfadjointView<Eigen::Lower>().rankUpdate(weighted.transpose(), 1.0 / K_);
        if ((s > 0.0).any()) {
            for (Eigen::Index k = 0; k < G_.rows(); ++k)
                if (s[k] > 0.0) hess_g.selfadjointView<Eigen::Lower>().rankUpdate(G_.row(k).transpose(), rho_ / K_);
        }
        hess_g = hess_g.selfadjointView<Eigen::Lower>();

        const double c1 = mean_constraint(a);
        const double c2 = variance_constraint(a);
        const Eigen::VectorXd qa = gram_ * a;
        grad = (mu_mean_ + rho_ * c1) * mean_row_ + 2.0 * (mu_var_ + rho_ * c2) * qa;
        hess = rho_ * mean_row_ * mean_row_.transpose() + 2.0 * (mu_var_ + rho_ * c2) * gram_ +
               4.0 * rho_ * qa * qa.transpose();
        for (Eigen::Index p = 0; p < ng; ++p) {
            const auto ip = grad_cols_[static_cast<std::size_t>(p)];
            grad[ip] += grad_g[p];
            for (Eigen::Index q = 0; q < ng; ++q) hess(ip, grad_cols_[static_cast<std::size_t>(q)]) += hess_g(p, q);
        }
        (void)n;
    }

    double inequality_violation(const Eigen::VectorXd& u) const {
        double v = 0.0;
        for (Eigen::Index k = 0; k < u.size(); ++k)
            v = std::max(v, std::abs(std::min(u[k] - lambda_, multipliers_ineq_[k] / rho_)));
        return v;
    }

    void update_multipliers(const Eigen::VectorXd& a, const Eigen::VectorXd& u) {
        mu_mean_ += rho_ * mean_constraint(a);
        mu_var_ += rho_ * variance_constraint(a);
        multipliers_ineq_ = (multipliers_ineq_.array() - rho_ * (u.array() - lambda_)).max(0.0).matrix();
    }

    double rho() const { return rho_; }
    void set_rho(double rho) { rho_ = rho; }

private:
    Eigen::VectorXd gather(const Eigen::VectorXd& a) const {
        Eigen::VectorXd g(static_cast<Eigen::Index>(grad_cols_.size()));
        for (std::size_t p = 0; p < grad_cols_.size(); ++p) g[static_cast<Eigen::Index>(p)] = a[grad_cols_[p]];
        return g;
    }

    Eigen::MatrixXd G_;
    std::vector<int> grad_cols_;
    double lambda_;
    double K_;
    Eigen::MatrixXd gram_;
    Eigen::VectorXd mean_row_;
    Eigen::VectorXd multipliers_ineq_;
    double mu_mean_ = 0.0;
    double mu_var_ = 0.0;
    double rho_ = 10.0;
};

Eigen::VectorXd solve_shifted(const Eigen::MatrixXd& H, const Eigen::VectorXd& rhs) {
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() == Eigen::Success) {
        Eigen::VectorXd p = llt.solve(rhs);
        if (p.allFinite()) return p;
    }
    const double scale = std::max(1e-12, H.diagonal().cwiseAbs().maxCoeff());
    for (double tau = 1e-10 * scale; tau < 1e12 * scale; tau *= 10.0) {
        Eigen::MatrixXd shifted = H;
        shifted.diagonal().array() += tau;
        llt.compute(shifted);
        if (llt.info() == Eigen::Success) return llt.solve(rhs);
    }
    return rhs; // steepest descent direction as a last resort
}

} // namespace

MapComponent build_component(const Eigen::MatrixXd& samples, const MultiIndexSet& set, const BuildOptions& opts,
                             ComponentDiagnostics* diagnostics) {
    require(opts.lambda_min > 0.0, ErrorCode::Config, "lambda_min must be positive");
    require(!set.empty(), ErrorCode::Config, "empty index set");
    const int d = set.dim();
    const int diag = d - 1;
    require(samples.cols() >= d, ErrorCode::DimensionMismatch, "samples narrower than the component's inputs");
    require(samples.rows() > set.size(), ErrorCode::Config,
            "need more samples (" + std::to_string(samples.rows()) + ") than basis functions (" +
                std::to_string(set.size()) + ")");

    Eigen::VectorXd shift = samples.leftCols(d).colwise().mean().transpose();
    Eigen::VectorXd scale(d);
    for (int k = 0; k < d; ++k) {
        const double sd = std::sqrt((samples.col(k).array() - shift[k]).square().mean());
        scale[k] = sd > 0.0 ? sd : 1.0;
    }
    const MapComponent standardizer(set, Eigen::VectorXd::Zero(set.size()), shift, scale);
    const Eigen::MatrixXd z = standardizer.standardize(samples);

    std::vector<int> grad_cols;
    for (int m = 0; m < set.size(); ++m)
        if (set[m][diag] > 0) grad_cols.push_back(m);
    require(!grad_cols.empty(), ErrorCode::InfeasibleStart, "index set has no term in the diagonal coordinate");

    const Eigen::MatrixXd full_g = grad_vandermonde(set, z, diag);
    Eigen::MatrixXd G(z.rows(), static_cast<Eigen::Index>(grad_cols.size()));
    for (std::size_t p = 0; p < grad_cols.size(); ++p) G.col(static_cast<Eigen::Index>(p)) = full_g.col(grad_cols[p]);

    // Bound on the standardized derivative equivalent to dT/dx >= lambda_min.
    const double lambda = opts.lambda_min * scale[diag];
    Eigen::VectorXd alpha;
    {
        std::vector<int> e(static_cast<std::size_t>(d), 0);
        e.back() = 1;
        const int lin = set.find(MultiIndex(e));
        if (lin < 0)
            throw Error(ErrorCode::InfeasibleStart, "index set lacks the linear term in the diagonal coordinate");
        alpha = Eigen::VectorXd::Zero(set.size());
        alpha[lin] = 1.0;
        if (lambda >= 1.0) alpha[lin] = 2.0 * lambda; // repair: scale the identity up to feasibility
    }

    Eigen::MatrixXd A = vandermonde(set, z);
    ComponentProblem problem(A, std::move(G), grad_cols, lambda);
    problem.set_rho(opts.initial_penalty);

    ComponentDiagnostics diag_info;
    double previous_violation = std::numeric_limits<double>::infinity();
    double kkt = std::numeric_limits<double>::infinity();
    bool converged = false;
    const double inner_tol = 0.1 * opts.kkt_tolerance;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;

    for (int outer = 0; outer < opts.max_outer_iterations && !converged; ++outer) {
        ++diag_info.outer_iterations;
        auto current = problem.value(alpha);
        require(std::isfinite(current.value), ErrorCode::InfeasibleStart, "starting point outside the log domain");
        double grad_norm = std::numeric_limits<double>::infinity();
        for (int it = 0; it < opts.max_newton_iterations; ++it) {
            problem.gradient_hessian(alpha, current.u, grad, hess);
            grad_norm = grad.lpNorm<Eigen::Infinity>();
            if (grad_norm <= inner_tol) break;
            ++diag_info.newton_iterations;
            const Eigen::VectorXd step = solve_shifted(hess, -grad);
            // the gradient can sit above inner_tol at round-off level once rho is large
            if (step.lpNorm<Eigen::Infinity>() <= 1e-14 * (1.0 + alpha.lpNorm<Eigen::Infinity>())) break;
            const double slope = grad.dot(step);
            // Near the optimum the predicted decrease drops below the round-off
            // of a K-term average; the quadratic model is then trusted as is.
            if (-slope <= 1e-11 * (1.0 + std::abs(current.value))) {
                auto trial = problem.value(alpha + step);
                if (std::isfinite(trial.value)) {
                    alpha += step;
                    current = std::move(trial);
                    continue;
                }
            }
            double t = 1.0;
            bool accepted = false;
            for (int h = 0; h < opts.max_halvings; ++h, t *= 0.5) {
                auto trial = problem.value(alpha + t * step);
                if (trial.value <= current.value + opts.armijo_c * t * slope) {
                    alpha += t * step;
                    current = std::move(trial);
                    accepted = true;
                    break;
                }
            }
            if (!accepted) break; // no further decrease representable
        }
        const double c1 = problem.mean_constraint(alpha);
        const double c2 = problem.variance_constraint(alpha);
        const double violation =
            std::max({std::abs(c1), std::abs(c2), problem.inequality_violation(current.u)});
        problem.update_multipliers(alpha, current.u);
        kkt = std::max(violation, grad_norm);
        if (violation <= opts.kkt_tolerance && grad_norm <= 10.0 * opts.kkt_tolerance) {
            converged = true;
            break;
        }
        if (violation > previous_violation / opts.required_shrink) problem.set_rho(problem.rho() * opts.penalty_growth);
        previous_violation = violation;
    }
    if (!converged) {
        // Accept a solution whose constraints are met even if the stationarity
        // residual stalled at round-off level.
        const Eigen::VectorXd u = problem.diag_values(alpha);
        const double violation = std::max({std::abs(problem.mean_constraint(alpha)),
                                           std::abs(problem.variance_constraint(alpha)),
                                           std::max(0.0, lambda - u.minCoeff())});
        if (violation > 1e-7)
            throw Error(ErrorCode::MaxIterations,
                        "augmented Lagrangian did not converge (KKT residual " + std::to_string(kkt) + ")");
    }

    MapComponent result(set, alpha, shift, scale);
    if (diagnostics) {
        const Eigen::VectorXd out = A * alpha;
        diag_info.kkt_residual = kkt;
        diag_info.sample_mean = out.mean();
        diag_info.sample_variance = (out.array() - out.mean()).square().mean();
        diag_info.min_diagonal = problem.diag_values(alpha).minCoeff() / scale[diag];
        *diagnostics = diag_info;
    }
    return result;
}

TriangularMap build_map(const Eigen::MatrixXd& samples, const std::vector<MultiIndexSet>& index_sets,
                        const BuildOptions& opts, std::vector<ComponentDiagnostics>* diagnostics) {
    const int dim = static_cast<int>(index_sets.size());
    require(samples.cols() == dim, ErrorCode::DimensionMismatch, "one index set per sample coordinate required");
    for (int i = 0; i < dim; ++i) {
        const auto& s = index_sets[static_cast<std::size_t>(i)];
        require(s.dim() == i + 1 && s.references_only_first(i + 1), ErrorCode::Config,
                "index set " + std::to_string(i) + " violates triangularity");
    }
    std::vector<MapComponent> comps(static_cast<std::size_t>(dim));
    std::vector<ComponentDiagnostics> diags(static_cast<std::size_t>(dim));
    parallel_for(dim, opts.threads, [&](int i) {
        try {
            comps[static_cast<std::size_t>(i)] =
                build_component(samples, index_sets[static_cast<std::size_t>(i)], opts, &diags[static_cast<std::size_t>(i)]);
        } catch (const Error& e) {
            throw Error(e.code(), "component " + std::to_string(i) + ": " + e.what());
        }
    });
    if (diagnostics) *diagnostics = std::move(diags);
    return TriangularMap(std::move(comps));
}

TriangularMap build_inverse_regression(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& target,
                                       const std::vector<MultiIndexSet>& index_sets, int threads) {
    const int dim = static_cast<int>(index_sets.size());
    require(reference.rows() == target.rows(), ErrorCode::DimensionMismatch, "reference/target row counts differ");
    require(reference.cols() == dim && target.cols() == dim, ErrorCode::DimensionMismatch,
            "one index set per coordinate required");
    std::vector<MapComponent> comps(static_cast<std::size_t>(dim));
    parallel_for(dim, threads, [&](int i) {
        const auto& set = index_sets[static_cast<std::size_t>(i)];
        require(!set.empty(), ErrorCode::Config, "empty index set for regression component " + std::to_string(i));
        require(set.dim() == i + 1 && set.references_only_first(i + 1), ErrorCode::Config,
                "index set " + std::to_string(i) + " violates triangularity");
        require(reference.rows() > set.size(), ErrorCode::Config, "regression needs more pairs than basis functions");
        const Eigen::MatrixXd V = vandermonde(set, reference);
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(V);
        if (qr.rank() < set.size())
            throw Error(ErrorCode::RankDeficient, "regression matrix for component " + std::to_string(i) + " has rank " +
                                                      std::to_string(qr.rank()) + " < " + std::to_string(set.size()));
        Eigen::VectorXd beta = qr.solve(target.col(i));
        comps[static_cast<std::size_t>(i)] = MapComponent(set, std::move(beta));
    });
    return TriangularMap(std::move(comps));
}

// ---------------------------------------------------------------------------
// Linear conditional map

Eigen::VectorXd LinearConditionalMap::evaluate(const Eigen::VectorXd& coarse_ref, const Eigen::VectorXd& fine_ref) const {
    require(coarse_ref.size() == coarse_dim() && fine_ref.size() == fine_dim(), ErrorCode::DimensionMismatch,
            "reference block sizes differ from the conditional map");
    return mean + gain * coarse_ref + noise_factor * fine_ref;
}

LinearConditionalMap cross_covariance_map(const Eigen::MatrixXd& theta_samples, const Eigen::MatrixXd& rc_samples,
                                          const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov) {
    require(theta_samples.rows() == rc_samples.rows() && theta_samples.rows() >= 2, ErrorCode::DimensionMismatch,
            "need at least two paired samples");
    require(theta_samples.cols() == prior_mean.size() && prior_cov.rows() == prior_mean.size() &&
                prior_cov.cols() == prior_mean.size(),
            ErrorCode::DimensionMismatch, "prior moments disagree with fine sample dimension");
    const double K = static_cast<double>(theta_samples.rows());
    const Eigen::MatrixXd rc = rc_samples.rowwise() - rc_samples.colwise().mean();
    const Eigen::MatrixXd th = theta_samples.rowwise() - theta_samples.colwise().mean();
    const Eigen::MatrixXd cross = rc.transpose() * th / (K - 1.0); // d_c x d_theta

    LinearConditionalMap map;
    map.mean = prior_mean;
    map.gain = cross.transpose();
    Eigen::MatrixXd cond = prior_cov - cross.transpose() * cross;
    cond = 0.5 * (cond + cond.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cond);
    require(eig.info() == Eigen::Success, ErrorCode::CovarianceNotPD, "eigendecomposition of conditional covariance failed");
    Eigen::VectorXd values = eig.eigenvalues();
    const double negative = (-values.array()).max(0.0).sum();
    const double positive = values.array().max(0.0).sum();
    map.clipped_fraction = positive > 0.0 ? negative / positive : (negative > 0.0 ? 1.0 : 0.0);
    map.clipped_warning = map.clipped_fraction > 1e-6;
    values = values.array().max(0.0).sqrt().matrix();
    map.noise_factor = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
    return map;
}

// ---------------------------------------------------------------------------
// Coarse maps

Eigen::MatrixXd CoarseMap::to_reference_many(const Eigen::MatrixXd& coarse) const {
    Eigen::MatrixXd out(coarse.rows(), dim());
    for (Eigen::Index k = 0; k < coarse.rows(); ++k) out.row(k) = to_reference(coarse.row(k).transpose()).transpose();
    return out;
}

TriangularCoarseMap::TriangularCoarseMap(TriangularMap forward, TriangularMap inverse)
    : forward_(std::move(forward)), inverse_(std::move(inverse)) {
    require(forward_.dim() == inverse_.dim(), ErrorCode::DimensionMismatch, "forward and inverse maps differ in dimension");
}

StationaryCoarseMap::StationaryCoarseMap(TriangularMap marginal_forward, TriangularMap marginal_inverse,
                                         Eigen::MatrixXd cholesky_factor)
    : marginal_forward_(std::move(marginal_forward)), marginal_inverse_(std::move(marginal_inverse)),
      cholesky_(std::move(cholesky_factor)) {
    require(marginal_forward_.dim() == marginal_inverse_.dim(), ErrorCode::DimensionMismatch,
            "marginal maps differ in dimension");
    require(cholesky_.rows() == cholesky_.cols() && cholesky_.rows() % marginal_forward_.dim() == 0,
            ErrorCode::DimensionMismatch, "Cholesky factor must be square with whole element blocks");
}

Eigen::VectorXd StationaryCoarseMap::to_coarse(const Eigen::VectorXd& reference) const {
    require(reference.size() == dim(), ErrorCode::DimensionMismatch, "reference dimension mismatch");
    const Eigen::VectorXd y = cholesky_.triangularView<Eigen::Lower>() * reference;
    const int b = block_dim();
    Eigen::VectorXd gamma(dim());
    for (int e = 0; e < element_count(); ++e) gamma.segment(b * e, b) = marginal_inverse_.evaluate(y.segment(b * e, b));
    return gamma;
}

Eigen::VectorXd StationaryCoarseMap::to_coarse_exact(const Eigen::VectorXd& reference, double tol) const {
    require(reference.size() == dim(), ErrorCode::DimensionMismatch, "reference dimension mismatch");
    const Eigen::VectorXd y = cholesky_.triangularView<Eigen::Lower>() * reference;
    const int b = block_dim();
    Eigen::VectorXd gamma(dim());
    for (int e = 0; e < element_count(); ++e) gamma.segment(b * e, b) = marginal_forward_.invert(y.segment(b * e, b), tol);
    return gamma;
}

Eigen::MatrixXd StationaryCoarseMap::to_coarse_jacobian(const Eigen::VectorXd& reference) const {
    const Eigen::VectorXd y = cholesky_.triangularView<Eigen::Lower>() * reference;
    const int b = block_dim();
    Eigen::MatrixXd J(dim(), dim());
    for (int e = 0; e < element_count(); ++e) {
        const Eigen::MatrixXd Je = marginal_inverse_.jacobian(y.segment(b * e, b));
        // rows of L for this block are zero beyond column b e + b - 1
        const int width = b * (e + 1);
        J.middleRows(b * e, b).setZero();
        J.block(b * e, 0, b, width) = Je * cholesky_.block(b * e, 0, b, width);
    }
    return J;
}

Eigen::VectorXd StationaryCoarseMap::marginal_reference(const Eigen::VectorXd& coarse) const {
    require(coarse.size() == dim(), ErrorCode::DimensionMismatch, "coarse dimension mismatch");
    const int b = block_dim();
    Eigen::VectorXd rm(dim());
    for (int e = 0; e < element_count(); ++e) rm.segment(b * e, b) = marginal_forward_.evaluate(coarse.segment(b * e, b));
    return rm;
}

Eigen::VectorXd StationaryCoarseMap::to_reference(const Eigen::VectorXd& coarse) const {
    return cholesky_.triangularView<Eigen::Lower>().solve(marginal_reference(coarse));
}

Eigen::MatrixXd StationaryCoarseMap::to_reference_many(const Eigen::MatrixXd& coarse) const {
    require(coarse.cols() == dim(), ErrorCode::DimensionMismatch, "coarse dimension mismatch");
    const int b = block_dim();
    Eigen::MatrixXd rm(coarse.rows(), dim());
    for (int e = 0; e < element_count(); ++e) rm.middleCols(b * e, b) = marginal_forward_.evaluate_many(coarse.middleCols(b * e, b));
    Eigen::MatrixXd rt = rm.transpose();
    cholesky_.triangularView<Eigen::Lower>().solveInPlace(rt);
    return rt.transpose();
}

StationaryCoarseMap build_stationary_coarse_map(const Eigen::MatrixXd& element_samples, int block_dim,
                                                const StationaryBuildOptions& opts) {
    require(block_dim >= 1 && element_samples.cols() % block_dim == 0, ErrorCode::DimensionMismatch,
            "element sample width must be a multiple of the block dimension");
    const Eigen::Index K = element_samples.rows();
    const int V = static_cast<int>(element_samples.cols() / block_dim);
    // pool whole prior draws so every element of a training row is in-sample
    Eigen::Index train_rows = K;
    if (opts.max_pooled_samples > 0) train_rows = std::min<Eigen::Index>(K, opts.max_pooled_samples / V);
    require(train_rows >= 2, ErrorCode::Config, "pooled sample cap leaves fewer than two prior draws");
    const Eigen::Index pooled_rows = train_rows * V;
    Eigen::MatrixXd pooled(pooled_rows, block_dim);
    for (Eigen::Index r = 0; r < pooled_rows; ++r) {
        const Eigen::Index k = r / V;
        const Eigen::Index e = r % V;
        pooled.row(r) = element_samples.block(k, block_dim * e, 1, block_dim);
    }
    const auto sets = total_degree_sets(block_dim, opts.degree);
    TriangularMap forward = build_map(pooled, sets, opts.build);
    const Eigen::MatrixXd pooled_ref = forward.evaluate_many(pooled);
    const auto inverse_sets = opts.inverse_degree > 0 ? total_degree_sets(block_dim, opts.inverse_degree) : sets;
    TriangularMap inverse = build_inverse_regression(pooled_ref, pooled, inverse_sets, opts.build.threads);

    // Polynomial maps extrapolate poorly, so the element coupling comes from the
    // training draws only; pooled_ref row k V + e is element e of draw k.
    Eigen::MatrixXd rm(train_rows, element_samples.cols());
    for (Eigen::Index k = 0; k < train_rows; ++k)
        for (int e = 0; e < V; ++e) rm.block(k, block_dim * e, 1, block_dim) = pooled_ref.row(k * V + e);
    const Eigen::MatrixXd centered = rm.rowwise() - rm.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(train_rows - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success || !(llt.matrixL().toDenseMatrix().diagonal().array() > 0.0).all())
        throw Error(ErrorCode::CovarianceNotPD, "covariance of the per-element reference blocks is not positive definite");
    return StationaryCoarseMap(std::move(forward), std::move(inverse), llt.matrixL().toDenseMatrix());
}

} // namespace mstm
