#pragma once

// Bias-free feedforward networks built from dense and valid-padding conv
// layers, split into a feature extractor and a head.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpa/error.hpp"

namespace mpa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Label = std::size_t;

enum class Activation { relu, identity };
enum class LayerKind { dense, conv2d };

/// Spatial layout of a conv layer. Inputs are flattened channel-major:
/// index = (c * in_height + y) * in_width + x.
struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t in_height = 1;
    std::size_t in_width = 1;
    std::size_t kernel_height = 1;
    std::size_t kernel_width = 1;
    std::size_t stride = 1;

    bool valid() const {
        return in_channels > 0 && stride > 0 && kernel_height > 0 && kernel_width > 0 &&
               kernel_height <= in_height && kernel_width <= in_width;
    }
    std::size_t out_height() const { return (in_height - kernel_height) / stride + 1; }
    std::size_t out_width() const { return (in_width - kernel_width) / stride + 1; }
    /// Number of positions the filter is applied at.
    std::size_t positions() const { return out_height() * out_width(); }
    std::size_t patch_size() const { return in_channels * kernel_height * kernel_width; }
    std::size_t input_size() const { return in_channels * in_height * in_width; }

    friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// One weight matrix plus activation. For dense layers `weights` is
/// out x in; for conv layers it is the filter matrix
/// out_channels x (in_channels * kernel_height * kernel_width).
struct Layer {
    LayerKind kind = LayerKind::dense;
    Matrix weights;
    Activation activation = Activation::relu;
    ConvGeometry geometry{};

    static Layer dense(Matrix w, Activation act) {
        return Layer{LayerKind::dense, std::move(w), act, {}};
    }
    static Layer conv(Matrix filters, ConvGeometry g, Activation act) {
        if (!g.valid()) throw InputShapeError("conv geometry: kernel larger than input or zero extent");
        if (std::size_t(filters.cols()) != g.patch_size()) {
            throw InputShapeError("conv filter matrix has " + std::to_string(filters.cols()) +
                                  " columns, geometry needs " + std::to_string(g.patch_size()));
        }
        return Layer{LayerKind::conv2d, std::move(filters), act, g};
    }

    std::size_t in_dim() const {
        return kind == LayerKind::dense ? std::size_t(weights.cols()) : geometry.input_size();
    }
    std::size_t out_dim() const {
        return kind == LayerKind::dense ? std::size_t(weights.rows())
                                        : std::size_t(weights.rows()) * geometry.positions();
    }
    /// Spatial positions of the output (1 for dense).
    std::size_t positions() const { return kind == LayerKind::dense ? 1 : geometry.positions(); }
};

/// im2col: column j holds the input patch seen at output position j.
inline Matrix extract_patches(const ConvGeometry& g, const Eigen::Ref<const Vector>& x) {
    const auto oh = g.out_height(), ow = g.out_width();
    const auto kh = g.kernel_height, kw = g.kernel_width;
    Matrix patches(Eigen::Index(g.patch_size()), Eigen::Index(oh * ow));
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto col = Eigen::Index(oy * ow + ox);
            Eigen::Index row = 0;
            for (std::size_t c = 0; c < g.in_channels; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx)
                        patches(row++, col) =
                            x(Eigen::Index((c * g.in_height + oy * g.stride + ky) * g.in_width +
                                           ox * g.stride + kx));
        }
    }
    return patches;
}

/// Adjoint of extract_patches: scatters patch gradients back onto the input.
inline Vector accumulate_patches(const ConvGeometry& g, const Matrix& patch_grads) {
    Vector dx = Vector::Zero(Eigen::Index(g.input_size()));
    const auto oh = g.out_height(), ow = g.out_width();
    const auto kh = g.kernel_height, kw = g.kernel_width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto col = Eigen::Index(oy * ow + ox);
            Eigen::Index row = 0;
            for (std::size_t c = 0; c < g.in_channels; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx)
                        dx(Eigen::Index((c * g.in_height + oy * g.stride + ky) * g.in_width +
                                        ox * g.stride + kx)) += patch_grads(row++, col);
        }
    }
    return dx;
}

inline void apply_activation(Activation act, Eigen::Ref<Matrix> z) {
    if (act == Activation::relu) z = z.cwiseMax(0.0);
}

/// Pre-activation output of one layer for a batch (one sample per column).
inline Matrix layer_preactivation(const Layer& layer, const Matrix& x) {
    if (layer.kind == LayerKind::dense) return layer.weights * x;
    const auto positions = Eigen::Index(layer.geometry.positions());
    Matrix out(Eigen::Index(layer.out_dim()), x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
        const Matrix y = layer.weights * extract_patches(layer.geometry, x.col(b));
        // Channel-major flatten: row oc holds that channel's spatial map.
        for (Eigen::Index oc = 0; oc < y.rows(); ++oc)
            out.col(b).segment(oc * positions, positions) = y.row(oc).transpose();
    }
    return out;
}

/// Ordered layers with matching adjacent dimensions.
class LayerStack {
public:
    LayerStack() = default;
    explicit LayerStack(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

    std::span<const Layer> layers() const noexcept { return layers_; }
    std::span<Layer> layers() noexcept { return layers_; }
    const Layer& operator[](std::size_t i) const { return layers_.at(i); }
    Layer& operator[](std::size_t i) { return layers_.at(i); }
    std::size_t size() const noexcept { return layers_.size(); }
    bool empty() const noexcept { return layers_.empty(); }
    std::size_t input_dim() const { return layers_.front().in_dim(); }
    std::size_t output_dim() const { return layers_.back().out_dim(); }

    bool has_conv() const {
        return std::any_of(layers_.begin(), layers_.end(),
                           [](const Layer& l) { return l.kind == LayerKind::conv2d; });
    }

    Matrix forward_batch(const Matrix& x) const {
        if (std::size_t(x.rows()) != input_dim()) {
            throw InputShapeError("input has dimension " + std::to_string(x.rows()) + ", expected " +
                                  std::to_string(input_dim()));
        }
        Matrix a = x;
        for (const auto& layer : layers_) {
            a = layer_preactivation(layer, a);
            apply_activation(layer.activation, a);
        }
        return a;
    }

    Vector forward(const Vector& x) const { return forward_batch(x); }

private:
    void validate() const {
        if (layers_.empty()) throw InputShapeError("layer stack is empty");
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.weights.size() == 0) throw InputShapeError("layer " + std::to_string(i) + " has no weights");
            if (!l.weights.allFinite()) throw InputError("layer " + std::to_string(i) + " has non-finite weights");
            if (l.kind == LayerKind::conv2d &&
                (!l.geometry.valid() || std::size_t(l.weights.cols()) != l.geometry.patch_size())) {
                throw InputShapeError("layer " + std::to_string(i) + ": inconsistent conv geometry");
            }
            if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
                throw InputShapeError("layer " + std::to_string(i) + " expects input " +
                                      std::to_string(l.in_dim()) + ", previous layer emits " +
                                      std::to_string(layers_[i - 1].out_dim()));
            }
        }
    }

    std::vector<Layer> layers_;
};

/// Feature extractor (layers [0, split_index)) followed by a head; the last
/// layer emits raw pre-softmax scores.
class Network {
public:
    Network(LayerStack stack, std::size_t split_index) : stack_(std::move(stack)), split_(split_index) {
        if (split_ < 1 || split_ >= stack_.size()) {
            throw InputShapeError("split_index " + std::to_string(split_) + " outside [1, " +
                                  std::to_string(stack_.size()) + ")");
        }
        if (stack_[stack_.size() - 1].activation != Activation::identity) {
            throw InputShapeError("final layer must use identity activation (raw scores)");
        }
    }

    const LayerStack& stack() const noexcept { return stack_; }
    LayerStack& stack() noexcept { return stack_; }
    std::size_t split_index() const noexcept { return split_; }
    std::size_t depth() const noexcept { return stack_.size(); }
    std::size_t input_dim() const { return stack_.input_dim(); }
    std::size_t output_dim() const { return stack_.output_dim(); }
    std::size_t feature_dim() const { return stack_[split_ - 1].out_dim(); }

    LayerStack feature_extractor() const {
        return LayerStack({stack_.layers().begin(), stack_.layers().begin() + long(split_)});
    }
    LayerStack head() const {
        return LayerStack({stack_.layers().begin() + long(split_), stack_.layers().end()});
    }

    Vector forward(const Vector& x) const { return stack_.forward(x); }
    Matrix forward_batch(const Matrix& x) const { return stack_.forward_batch(x); }

private:
    LayerStack stack_;
    std::size_t split_;
};

inline Network compose(const LayerStack& extractor, const LayerStack& head) {
    std::vector<Layer> layers(extractor.layers().begin(), extractor.layers().end());
    layers.insert(layers.end(), head.layers().begin(), head.layers().end());
    return Network(LayerStack(std::move(layers)), extractor.size());
}

inline std::pair<LayerStack, LayerStack> split(const Network& net) {
    return {net.feature_extractor(), net.head()};
}

/// Weight matrices recorded at initialization (the reference matrices of
/// the capacity terms).
struct InitSnapshot {
    std::vector<Matrix> matrices;

    static InitSnapshot capture(const LayerStack& stack) {
        InitSnapshot s;
        for (const auto& l : stack.layers()) s.matrices.push_back(l.weights);
        return s;
    }
    bool matches(const LayerStack& stack) const {
        if (matrices.size() != stack.size()) return false;
        for (std::size_t i = 0; i < matrices.size(); ++i) {
            if (matrices[i].rows() != stack[i].weights.rows() || matrices[i].cols() != stack[i].weights.cols())
                return false;
        }
        return true;
    }
};

/// Lowest index attaining the maximum score.
inline Label argmax_label(const Eigen::Ref<const Vector>& scores) {
    Label best = 0;
    for (Eigen::Index i = 1; i < scores.size(); ++i)
        if (scores(i) > scores(Eigen::Index(best))) best = Label(i);
    return best;
}

inline Label predict_label(const Network& net, const Vector& x) { return argmax_label(net.forward(x)); }

/// Stacks samples as columns.
inline Matrix as_columns(std::span<const Vector> xs) {
    if (xs.empty()) return {};
    Matrix m(xs.front().size(), Eigen::Index(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != m.rows()) throw InputShapeError("inputs have inconsistent dimensions");
        m.col(Eigen::Index(i)) = xs[i];
    }
    return m;
}

namespace detail {
inline void check_labeled(std::size_t inputs, std::size_t labels) {
    if (inputs != labels) {
        throw InputError(std::to_string(inputs) + " inputs but " + std::to_string(labels) + " labels");
    }
    if (inputs == 0) throw InputError("empty dataset");
}
inline void check_label_range(std::span<const Label> labels, std::size_t num_classes) {
    for (auto t : labels)
        if (t >= num_classes) throw InputError("label " + std::to_string(t) + " exceeds output dimension");
}
}  // namespace detail

/// Misclassified count for scores already computed (one sample per column).
inline std::size_t count_misclassified(const Matrix& scores, std::span<const Label> labels) {
    std::size_t misses = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) misses += argmax_label(scores.col(Eigen::Index(i))) != labels[i];
    return misses;
}

/// Count of 1[score_t < gamma + max_{u != t} score_u]. Strict: a tie at
/// gamma == 0 is not a miss.
inline std::size_t count_margin_misses(const Matrix& scores, std::span<const Label> labels, double gamma) {
    if (!(gamma >= 0.0)) throw ParameterError("margin must be non-negative");
    std::size_t misses = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto col = scores.col(Eigen::Index(i));
        const auto t = Eigen::Index(labels[i]);
        double runner_up = -std::numeric_limits<double>::infinity();
        for (Eigen::Index u = 0; u < col.size(); ++u)
            if (u != t) runner_up = std::max(runner_up, col(u));
        misses += col(t) < gamma + runner_up;
    }
    return misses;
}

inline std::size_t count_misclassified(const Network& net, std::span<const Vector> inputs,
                                       std::span<const Label> labels) {
    detail::check_labeled(inputs.size(), labels.size());
    detail::check_label_range(labels, net.output_dim());
    return count_misclassified(net.forward_batch(as_columns(inputs)), labels);
}

inline double empirical_risk_01(const Network& net, std::span<const Vector> inputs, std::span<const Label> labels) {
    return double(count_misclassified(net, inputs, labels)) / double(labels.size());
}

inline double empirical_risk_margin(const Network& net, std::span<const Vector> inputs,
                                    std::span<const Label> labels, double gamma) {
    if (!(gamma >= 0.0)) throw ParameterError("margin must be non-negative");
    detail::check_labeled(inputs.size(), labels.size());
    detail::check_label_range(labels, net.output_dim());
    const auto misses = count_margin_misses(net.forward_batch(as_columns(inputs)), labels, gamma);
    return double(misses) / double(labels.size());
}

struct RiskEstimate {
    double risk = 0.0;
    double standard_error = 0.0;
    std::size_t n = 0;
};

/// Held-out Monte Carlo estimate of the true 0-1 risk.
inline RiskEstimate true_risk_estimate(const Network& net, std::span<const Vector> heldout_inputs,
                                       std::span<const Label> heldout_labels) {
    if (heldout_inputs.empty()) throw InputError("held-out set is empty");
    RiskEstimate e;
    e.n = heldout_inputs.size();
    e.risk = empirical_risk_01(net, heldout_inputs, heldout_labels);
    e.standard_error = std::sqrt(e.risk * (1.0 - e.risk) / double(e.n));
    return e;
}

}  // namespace mpa
