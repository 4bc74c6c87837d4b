#pragma once

// Reference implementations used only by the tests. Each one is written
// from the textbook definition and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    const std::size_t m = a.size(), k = b.size(), n = b.front().size();
    Matrix c(m, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i][j] += a[i][p] * b[p][j];
    return c;
}

// Central differences of f at x.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                            double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// max over entries of |a − n| / max(|a|, |n|, floor)
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

// One-way ANOVA F for one column, two passes over the data.
inline double anova_f(const std::vector<double>& x, const std::vector<int>& y) {
    std::map<int, std::vector<double>> groups;
    for (std::size_t i = 0; i < x.size(); ++i) groups[y[i]].push_back(x[i]);
    long double grand = 0.0L;
    for (double v : x) grand += v;
    grand /= static_cast<long double>(x.size());
    long double ss_between = 0.0L, ss_within = 0.0L;
    for (const auto& [label, vals] : groups) {
        long double mu = 0.0L;
        for (double v : vals) mu += v;
        mu /= static_cast<long double>(vals.size());
        ss_between += static_cast<long double>(vals.size()) * (mu - grand) * (mu - grand);
        for (double v : vals) ss_within += (v - mu) * (v - mu);
    }
    const long double c = static_cast<long double>(groups.size());
    const long double n = static_cast<long double>(x.size());
    return static_cast<double>((ss_between / (c - 1.0L)) / (ss_within / (n - c)));
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    long double dot = 0.0L, na = 0.0L, nb = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<long double>(a[i]) * b[i];
        na += static_cast<long double>(a[i]) * a[i];
        nb += static_cast<long double>(b[i]) * b[i];
    }
    if (na == 0.0L || nb == 0.0L) return 0.0;
    return static_cast<double>(dot / std::sqrt(na * nb));
}

inline Eigen::MatrixXd to_eigen(const Matrix& rows) {
    Eigen::MatrixXd m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

// Leading eigenvector of a symmetric matrix via a full eigendecomposition.
inline std::vector<double> top_eigenvector_eigen(const Eigen::MatrixXd& sym) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
    const Eigen::VectorXd v = solver.eigenvectors().col(sym.rows() - 1);
    return {v.data(), v.data() + v.size()};
}

// Plain power iteration, fixed iteration count.
inline std::vector<double> top_eigenvector_power(const Eigen::MatrixXd& sym, int iterations = 1000, unsigned seed = 99) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::VectorXd v(sym.rows());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = u(rng);
    v.normalize();
    for (int it = 0; it < iterations; ++it) {
        v = sym * v;
        v.normalize();
    }
    return {v.data(), v.data() + v.size()};
}

// Covariance (centre = true) or raw second moment of the rows.
inline Eigen::MatrixXd scatter_matrix(const Matrix& rows, bool centre) {
    Eigen::MatrixXd x = to_eigen(rows);
    if (centre) x.rowwise() -= x.colwise().mean();
    return (x.transpose() * x) / static_cast<double>(x.rows());
}

// MTLD by re-counting the distinct types of the current segment from scratch
// at every step.
inline double mtld_one_way(const std::vector<std::size_t>& t) {
    double factors = 0.0;
    std::size_t start = 0;
    double last_ttr = 1.0;
    for (std::size_t end = 0; end < t.size(); ++end) {
        std::set<std::size_t> distinct(t.begin() + static_cast<long>(start), t.begin() + static_cast<long>(end) + 1);
        const double ttr = static_cast<double>(distinct.size()) / static_cast<double>(end - start + 1);
        last_ttr = ttr;
        if (ttr < 0.72) {
            factors += 1.0;
            start = end + 1;
            last_ttr = 1.0;
        }
    }
    if (start < t.size()) factors += (1.0 - last_ttr) / 0.28;
    return factors == 0.0 ? static_cast<double>(t.size()) : static_cast<double>(t.size()) / factors;
}

inline double mtld(const std::vector<std::size_t>& t) {
    std::vector<std::size_t> r(t.rbegin(), t.rend());
    return 0.5 * (mtld_one_way(t) + mtld_one_way(r));
}

inline double entropy_bits(const std::vector<std::size_t>& t) {
    std::map<std::size_t, double> p;
    for (auto x : t) p[x] += 1.0 / static_cast<double>(t.size());
    double h = 0.0;
    for (const auto& [k, q] : p) h -= q * std::log(q);
    return h / std::log(2.0);
}

}  // namespace oracle
