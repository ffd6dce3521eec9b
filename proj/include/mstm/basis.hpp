#pragma once

// Multivariate probabilists' Hermite bases over multi-index sets.

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace mstm {

/// Polynomial degree per input coordinate. Coordinates are 0-based in code.
class MultiIndex {
public:
    MultiIndex() = default;
    explicit MultiIndex(std::vector<int> degrees);

    int dim() const { return static_cast<int>(degrees_.size()); }
    int operator[](int k) const { return degrees_[static_cast<std::size_t>(k)]; }
    const std::vector<int>& degrees() const { return degrees_; }
    int total_degree() const { return total_; }

    /// (coordinate, degree) pairs with degree > 0, in coordinate order.
    const std::vector<std::pair<int, int>>& nonzeros() const { return nonzeros_; }

    friend bool operator==(const MultiIndex& a, const MultiIndex& b) { return a.degrees_ == b.degrees_; }

private:
    std::vector<int> degrees_;
    std::vector<std::pair<int, int>> nonzeros_;
    int total_ = 0;
};

/// Graded-lexicographic order: lower total degree first, then larger leading
/// coordinates first, so (1,0) precedes (0,1).
bool graded_lex_less(const MultiIndex& a, const MultiIndex& b);

/// Ordered, duplicate-free set of multi-indices over `dim` inputs. The order
/// fixes the coefficient layout of every map component built on the set.
class MultiIndexSet {
public:
    MultiIndexSet() = default;
    explicit MultiIndexSet(int dim) : dim_(dim) {}
    /// Deduplicates and sorts into graded-lexicographic order.
    MultiIndexSet(int dim, std::vector<MultiIndex> indices);

    int dim() const { return dim_; }
    int size() const { return static_cast<int>(indices_.size()); }
    bool empty() const { return indices_.empty(); }
    const MultiIndex& operator[](int m) const { return indices_[static_cast<std::size_t>(m)]; }
    const std::vector<MultiIndex>& indices() const { return indices_; }

    bool contains(const MultiIndex& j) const;
    int find(const MultiIndex& j) const; // -1 when absent
    /// Largest degree used on coordinate k.
    int max_degree(int k) const;
    int max_total_degree() const;
    /// True when every index with a nonzero entry at coordinate >= n is absent.
    bool references_only_first(int n) const;
    bool is_downward_closed() const;

private:
    int dim_ = 0;
    std::vector<MultiIndex> indices_;
};

void to_json(nlohmann::json& j, const MultiIndexSet& set);
void from_json(const nlohmann::json& j, MultiIndexSet& set);

/// All multi-indices in `dim` coordinates with 1-norm <= degree.
MultiIndexSet total_degree_set(int dim, int degree);

/// Localized index set for fine output `i` (1-based) of a 1D multiscale map
/// with `coarse_dim` coarse inputs and `fine_per_coarse` fine cells per coarse
/// element: every linear term over the first coarse_dim + i coordinates plus
/// all terms of degree <= P supported on the owning coarse coordinate and the
/// output's own fine coordinate. P must be odd.
MultiIndexSet localized_set_1d(int i, int coarse_dim, int fine_per_coarse, int degree);

/// Owning coarse element (1-based) of fine coordinate i (1-based).
int owning_coarse_element(int i, int fine_per_coarse);

/// He_n(x) via He_{n+1} = x He_n - n He_{n-1}.
double hermite(int order, double x);
/// values[n] = He_n(x) for n = 0..values.size()-1.
void hermite_table(double x, std::span<double> values);

double basis_eval(const MultiIndex& j, std::span<const double> x);
/// Partial derivative with respect to coordinate k (0-based).
double basis_partial(const MultiIndex& j, std::span<const double> x, int k);

/// K x |J| matrix of basis evaluations; samples are rows with at least J.dim() columns.
Eigen::MatrixXd vandermonde(const MultiIndexSet& set, const Eigen::MatrixXd& samples);
/// K x |J| matrix of partial derivatives with respect to coordinate k (0-based).
Eigen::MatrixXd grad_vandermonde(const MultiIndexSet& set, const Eigen::MatrixXd& samples, int k);

/// Single-point versions, returning one row.
Eigen::RowVectorXd basis_row(const MultiIndexSet& set, std::span<const double> x);
Eigen::RowVectorXd partial_row(const MultiIndexSet& set, std::span<const double> x, int k);

} // namespace mstm
