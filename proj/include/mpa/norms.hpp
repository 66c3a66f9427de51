#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "mpa/error.hpp"
#include "mpa/tinynet.hpp"

namespace mpa {

struct PowerIterationOptions {
    std::size_t max_iterations = 1000;
    double relative_tolerance = 1e-10;  // on successive Rayleigh quotients
};

namespace detail {
inline void check_finite(const Matrix& a, const char* what) {
    if (a.size() == 0) throw InputError(std::string(what) + ": empty matrix");
    if (!a.allFinite()) throw InputError(std::string(what) + ": non-finite entries");
}

// Largest eigenvalue of AᵀA by power iteration from the unit vector `v`.
inline double top_gram_eigenvalue(const Matrix& a, Vector v, const PowerIterationOptions& opt) {
    double previous = 0.0;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        const Vector w = a.transpose() * (a * v);
        const double rayleigh = v.dot(w);
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        if (it > 0 && std::abs(rayleigh - previous) <= opt.relative_tolerance * std::abs(rayleigh)) return rayleigh;
        previous = rayleigh;
        v = w / norm;
    }
    return previous;
}
}  // namespace detail

inline double frobenius_norm(const Matrix& a) { return a.norm(); }

/// Largest singular value via power iteration on AᵀA from the normalized
/// all-ones vector. A second start at the largest column is used when the
/// first run lands below that column's norm, a lower bound on the answer.
inline double spectral_norm(const Matrix& a, const PowerIterationOptions& opt = {}) {
    detail::check_finite(a, "spectral_norm");
    const auto n = a.cols();
    double lambda = detail::top_gram_eigenvalue(a, Vector::Constant(n, 1.0 / std::sqrt(double(n))), opt);
    Eigen::Index col = 0;
    const double max_col = a.colwise().norm().maxCoeff(&col);
    if (std::sqrt(std::max(lambda, 0.0)) < max_col) {
        lambda = std::max(lambda, detail::top_gram_eigenvalue(a, Vector::Unit(n, col), opt));
    }
    return std::sqrt(std::max(lambda, 0.0));
}

/// Sum of column Euclidean norms. Pass a transpose for row sums.
inline double norm_21(const Matrix& a) {
    detail::check_finite(a, "norm_21");
    return a.colwise().norm().sum();
}

/// Largest Euclidean norm of any row.
inline double max_row_norm(const Matrix& a) {
    detail::check_finite(a, "max_row_norm");
    return a.rowwise().norm().maxCoeff();
}

}  // namespace mpa
