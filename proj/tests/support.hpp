#pragma once

#include <random>
#include <vector>

#include "mpa/mpa.hpp"
#include "oracles.hpp"

namespace testing_support {

using mpa::Matrix;
using mpa::Vector;

inline Matrix to_matrix(const oracle::Grid& g) {
    Matrix m(Eigen::Index(g.size()), Eigen::Index(g[0].size()));
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g[0].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = g[i][j];
    return m;
}

inline oracle::Grid to_grid(const Matrix& m) {
    oracle::Grid g(std::size_t(m.rows()), std::vector<double>(std::size_t(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) g[std::size_t(i)][std::size_t(j)] = m(i, j);
    return g;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Vector v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = d(rng);
    return v;
}

inline std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Random bias-free dense stack: `depth` layers, widths in [1, max_width],
/// ReLU everywhere except an identity final layer.
inline mpa::LayerStack random_dense_stack(std::mt19937_64& rng, std::size_t depth, std::size_t max_width,
                                          std::size_t min_width = 1) {
    std::vector<mpa::Layer> layers;
    auto prev = uniform(rng, min_width, max_width);
    for (std::size_t l = 0; l < depth; ++l) {
        const auto w = uniform(rng, min_width, max_width);
        layers.push_back(mpa::Layer::dense(to_matrix(oracle::random_grid(w, prev, rng)),
                                           l + 1 == depth ? mpa::Activation::identity : mpa::Activation::relu));
        prev = w;
    }
    return mpa::LayerStack(std::move(layers));
}

inline mpa::ConvGeometry random_geometry(std::mt19937_64& rng) {
    mpa::ConvGeometry g;
    g.in_channels = uniform(rng, 1, 3);
    g.in_height = uniform(rng, 1, 7);
    g.in_width = uniform(rng, 1, 7);
    g.kernel_height = uniform(rng, 1, g.in_height);
    g.kernel_width = uniform(rng, 1, g.in_width);
    g.stride = uniform(rng, 1, 3);
    return g;
}

/// Channel-major unflattening, written out independently of the library.
inline oracle::Tensor3 unflatten(const Vector& x, std::size_t c, std::size_t h, std::size_t w) {
    oracle::Tensor3 t(c, oracle::Grid(h, std::vector<double>(w)));
    std::size_t k = 0;
    for (auto& plane : t)
        for (auto& row : plane)
            for (auto& v : row) v = x(Eigen::Index(k++));
    return t;
}

/// Filter matrix row oc, column (c, ky, kx) -> filters[oc][c][ky][kx].
inline std::vector<oracle::Tensor3> filters_of(const Matrix& f, const mpa::ConvGeometry& g) {
    std::vector<oracle::Tensor3> out;
    for (Eigen::Index oc = 0; oc < f.rows(); ++oc) {
        Vector row = f.row(oc).transpose();
        out.push_back(unflatten(row, g.in_channels, g.kernel_height, g.kernel_width));
    }
    return out;
}

inline std::vector<double> flatten(const oracle::Tensor3& t) {
    std::vector<double> v;
    for (const auto& plane : t)
        for (const auto& row : plane)
            for (double x : row) v.push_back(x);
    return v;
}

}  // namespace testing_support
