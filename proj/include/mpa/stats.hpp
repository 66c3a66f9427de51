#pragma once

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "mpa/error.hpp"

namespace mpa {

/// Sample Pearson correlation (two-pass, centered sums).
inline double pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ParameterError("pearson_r: sequences differ in length");
    if (x.size() < 3) throw ParameterError("pearson_r: need at least 3 pairs");
    const auto n = double(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("pearson_r: zero variance");
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

/// Two-tailed p-value of H0: rho = 0 from t = r sqrt((n-2)/(1-r^2)) with
/// n-2 degrees of freedom, i.e. I_{ν/(ν+t²)}(ν/2, 1/2).
inline double p_value(double r, std::size_t n_pairs) {
    if (n_pairs < 3) throw ParameterError("p_value: need at least 3 pairs");
    if (!(std::abs(r) <= 1.0)) throw ParameterError("p_value: |r| must not exceed 1");
    if (std::abs(r) == 1.0) return 0.0;
    const double dof = double(n_pairs - 2);
    // ν/(ν+t²) simplifies to 1 - r².
    return boost::math::ibeta(dof / 2.0, 0.5, 1.0 - r * r);
}

}  // namespace mpa
