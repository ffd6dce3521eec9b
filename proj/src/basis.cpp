#include "mstm/basis.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "mstm/error.hpp"

namespace mstm {

MultiIndex::MultiIndex(std::vector<int> degrees) : degrees_(std::move(degrees)) {
    for (int k = 0; k < dim(); ++k) {
        const int d = degrees_[static_cast<std::size_t>(k)];
        require(d >= 0, ErrorCode::Config, "multi-index entries must be non-negative");
        if (d > 0) nonzeros_.emplace_back(k, d);
        total_ += d;
    }
}

bool graded_lex_less(const MultiIndex& a, const MultiIndex& b) {
    if (a.total_degree() != b.total_degree()) return a.total_degree() < b.total_degree();
    return std::lexicographical_compare(b.degrees().begin(), b.degrees().end(), a.degrees().begin(),
                                        a.degrees().end());
}

MultiIndexSet::MultiIndexSet(int dim, std::vector<MultiIndex> indices) : dim_(dim), indices_(std::move(indices)) {
    for (const auto& j : indices_)
        require(j.dim() == dim_, ErrorCode::DimensionMismatch, "multi-index length differs from set dimension");
    std::sort(indices_.begin(), indices_.end(), graded_lex_less);
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
}

int MultiIndexSet::find(const MultiIndex& j) const {
    const auto it = std::lower_bound(indices_.begin(), indices_.end(), j, graded_lex_less);
    if (it != indices_.end() && *it == j) return static_cast<int>(it - indices_.begin());
    return -1;
}

bool MultiIndexSet::contains(const MultiIndex& j) const { return find(j) >= 0; }

int MultiIndexSet::max_degree(int k) const {
    int p = 0;
    for (const auto& j : indices_) p = std::max(p, j[k]);
    return p;
}

int MultiIndexSet::max_total_degree() const {
    int p = 0;
    for (const auto& j : indices_) p = std::max(p, j.total_degree());
    return p;
}

bool MultiIndexSet::references_only_first(int n) const {
    for (const auto& j : indices_)
        for (const auto& [k, d] : j.nonzeros())
            if (k >= n) return false;
    return true;
}

bool MultiIndexSet::is_downward_closed() const {
    for (const auto& j : indices_) {
        for (const auto& [k, d] : j.nonzeros()) {
            auto lower = j.degrees();
            lower[static_cast<std::size_t>(k)] -= 1;
            if (!contains(MultiIndex(lower))) return false;
        }
    }
    return true;
}

void to_json(nlohmann::json& j, const MultiIndexSet& set) {
    auto rows = nlohmann::json::array();
    for (const auto& idx : set.indices()) rows.push_back(idx.degrees());
    j = nlohmann::json{{"dim", set.dim()}, {"indices", rows}};
}

void from_json(const nlohmann::json& j, MultiIndexSet& set) {
    const int dim = j.at("dim").get<int>();
    std::vector<MultiIndex> indices;
    for (const auto& row : j.at("indices")) indices.emplace_back(row.get<std::vector<int>>());
    set = MultiIndexSet(dim, std::move(indices));
}

MultiIndexSet total_degree_set(int dim, int degree) {
    require(dim >= 1 && degree >= 0, ErrorCode::Config, "total_degree_set needs dim >= 1 and degree >= 0");
    std::vector<MultiIndex> out;
    std::vector<int> current(static_cast<std::size_t>(dim), 0);
    std::function<void(int, int)> fill = [&](int k, int remaining) {
        if (k == dim) {
            out.emplace_back(current);
            return;
        }
        for (int d = 0; d <= remaining; ++d) {
            current[static_cast<std::size_t>(k)] = d;
            fill(k + 1, remaining - d);
        }
        current[static_cast<std::size_t>(k)] = 0;
    };
    fill(0, degree);
    return MultiIndexSet(dim, std::move(out));
}

int owning_coarse_element(int i, int fine_per_coarse) { return (i - 1) / fine_per_coarse + 1; }

MultiIndexSet localized_set_1d(int i, int coarse_dim, int fine_per_coarse, int degree) {
    require(i >= 1 && coarse_dim >= 1 && fine_per_coarse >= 1, ErrorCode::Config,
            "localized_set_1d needs positive indices");
    require(degree >= 1 && degree % 2 == 1, ErrorCode::Config, "localized_set_1d needs an odd degree P >= 1");
    require(owning_coarse_element(i, fine_per_coarse) <= coarse_dim, ErrorCode::Config,
            "fine index exceeds coarse_dim * fine_per_coarse");
    const int dim = coarse_dim + i;
    std::vector<MultiIndex> out;
    std::vector<int> zero(static_cast<std::size_t>(dim), 0);
    out.emplace_back(zero);
    for (int k = 0; k < dim; ++k) {
        auto e = zero;
        e[static_cast<std::size_t>(k)] = 1;
        out.emplace_back(e);
    }
    const auto coarse = static_cast<std::size_t>(owning_coarse_element(i, fine_per_coarse) - 1);
    const auto fine = static_cast<std::size_t>(dim - 1);
    for (int a = 0; a <= degree; ++a) {
        for (int b = 0; a + b <= degree; ++b) {
            auto e = zero;
            e[coarse] = a;
            e[fine] = b;
            out.emplace_back(e);
        }
    }
    return MultiIndexSet(dim, std::move(out));
}

double hermite(int order, double x) {
    if (order == 0) return 1.0;
    double prev = 1.0, cur = x;
    for (int n = 1; n < order; ++n) {
        const double next = x * cur - n * prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

void hermite_table(double x, std::span<double> values) {
    if (values.empty()) return;
    values[0] = 1.0;
    if (values.size() > 1) values[1] = x;
    for (std::size_t n = 1; n + 1 < values.size(); ++n)
        values[n + 1] = x * values[n] - static_cast<double>(n) * values[n - 1];
}

double basis_eval(const MultiIndex& j, std::span<const double> x) {
    require(x.size() >= static_cast<std::size_t>(j.dim()), ErrorCode::DimensionMismatch, "point shorter than multi-index");
    double v = 1.0;
    for (const auto& [k, d] : j.nonzeros()) v *= hermite(d, x[static_cast<std::size_t>(k)]);
    return v;
}

double basis_partial(const MultiIndex& j, std::span<const double> x, int k) {
    require(x.size() >= static_cast<std::size_t>(j.dim()), ErrorCode::DimensionMismatch, "point shorter than multi-index");
    if (k >= j.dim() || j[k] == 0) return 0.0;
    double v = 1.0;
    for (const auto& [c, d] : j.nonzeros()) {
        const double xc = x[static_cast<std::size_t>(c)];
        v *= (c == k) ? d * hermite(d - 1, xc) : hermite(d, xc);
    }
    return v;
}

namespace {

// Per-coordinate tables He_0..He_p evaluated at every sample (K x (p+1)).
std::vector<Eigen::MatrixXd> coordinate_tables(const MultiIndexSet& set, const Eigen::MatrixXd& samples) {
    std::vector<Eigen::MatrixXd> tables(static_cast<std::size_t>(set.dim()));
    const Eigen::Index K = samples.rows();
    for (int k = 0; k < set.dim(); ++k) {
        const int p = set.max_degree(k);
        if (p == 0) continue;
        auto& t = tables[static_cast<std::size_t>(k)];
        t.resize(K, p + 1);
        t.col(0).setOnes();
        t.col(1) = samples.col(k);
        for (int n = 1; n < p; ++n) t.col(n + 1) = samples.col(k).cwiseProduct(t.col(n)) - n * t.col(n - 1);
    }
    return tables;
}

void check_samples(const MultiIndexSet& set, const Eigen::MatrixXd& samples) {
    require(samples.rows() >= 1, ErrorCode::DimensionMismatch, "vandermonde needs at least one sample");
    require(samples.cols() >= set.dim(), ErrorCode::DimensionMismatch, "sample dimension smaller than index-set dimension");
}

} // namespace

Eigen::MatrixXd vandermonde(const MultiIndexSet& set, const Eigen::MatrixXd& samples) {
    check_samples(set, samples);
    const auto tables = coordinate_tables(set, samples);
    Eigen::MatrixXd A(samples.rows(), set.size());
    for (int m = 0; m < set.size(); ++m) {
        auto col = A.col(m);
        col.setOnes();
        for (const auto& [k, d] : set[m].nonzeros()) col.array() *= tables[static_cast<std::size_t>(k)].col(d).array();
    }
    return A;
}

Eigen::MatrixXd grad_vandermonde(const MultiIndexSet& set, const Eigen::MatrixXd& samples, int k) {
    check_samples(set, samples);
    const auto tables = coordinate_tables(set, samples);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(samples.rows(), set.size());
    for (int m = 0; m < set.size(); ++m) {
        const auto& j = set[m];
        if (k >= j.dim() || j[k] == 0) continue;
        auto col = G.col(m);
        col.setOnes();
        for (const auto& [c, d] : j.nonzeros()) {
            const auto& t = tables[static_cast<std::size_t>(c)];
            if (c == k)
                col.array() *= d * t.col(d - 1).array();
            else
                col.array() *= t.col(d).array();
        }
    }
    return G;
}

Eigen::RowVectorXd basis_row(const MultiIndexSet& set, std::span<const double> x) {
    require(x.size() >= static_cast<std::size_t>(set.dim()), ErrorCode::DimensionMismatch, "point shorter than index set");
    std::vector<std::vector<double>> tables(static_cast<std::size_t>(set.dim()));
    for (int k = 0; k < set.dim(); ++k) {
        auto& t = tables[static_cast<std::size_t>(k)];
        t.resize(static_cast<std::size_t>(set.max_degree(k) + 1));
        hermite_table(x[static_cast<std::size_t>(k)], t);
    }
    Eigen::RowVectorXd row(set.size());
    for (int m = 0; m < set.size(); ++m) {
        double v = 1.0;
        for (const auto& [c, d] : set[m].nonzeros()) v *= tables[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)];
        row[m] = v;
    }
    return row;
}

Eigen::RowVectorXd partial_row(const MultiIndexSet& set, std::span<const double> x, int k) {
    Eigen::RowVectorXd row(set.size());
    for (int m = 0; m < set.size(); ++m) row[m] = basis_partial(set[m], x, k);
    return row;
}

} // namespace mstm
