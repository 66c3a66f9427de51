#pragma once

// Norm-based capacity terms of the transferred network and the assembled
// bound report. The report keeps every term separate: the hidden universal
// constants make a single scalar bound meaningless.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mpa/error.hpp"
#include "mpa/norms.hpp"
#include "mpa/tinynet.hpp"
#include "mpa/transfer.hpp"

namespace mpa {

struct NormProfile {
    std::vector<double> frobenius;
    std::vector<double> spectral;
    std::vector<double> displacement_21;  // ‖A^i − M^i‖_{2,1}
    double final_max_row = 0.0;
    double spectral_product = 0.0;  // over all layers but the last
};

inline void check_reference(std::span<const Matrix> weights, std::span<const Matrix> reference) {
    if (weights.empty()) throw InputShapeError("no layers");
    if (weights.size() != reference.size()) throw InputShapeError("reference matrices do not match layer count");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].rows() != reference[i].rows() || weights[i].cols() != reference[i].cols())
            throw InputShapeError("reference matrix " + std::to_string(i) + " has the wrong shape");
    }
}

inline NormProfile norm_profile(std::span<const Matrix> weights, std::span<const Matrix> reference) {
    check_reference(weights, reference);
    NormProfile p;
    p.spectral_product = 1.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        p.frobenius.push_back(frobenius_norm(weights[i]));
        p.spectral.push_back(spectral_norm(weights[i]));
        p.displacement_21.push_back(norm_21(weights[i] - reference[i]));
        if (i + 1 < weights.size()) p.spectral_product *= p.spectral.back();
    }
    p.final_max_row = max_row_norm(weights.back());
    return p;
}

struct FcCapacity {
    double value = 0.0;
    NormProfile norms;
};

/// Capacity of a fully connected network relative to reference matrices:
///   L · ρ · Π_{i<L} ‖A^i‖_σ · (Σ_{i<L} (‖A^i−M^i‖_{2,1} / ‖A^i‖_σ)^{2/3} + (‖A^L‖_Fr / ρ)^{2/3})^{3/2}
/// with ρ the largest row norm of the final matrix A^L.
inline FcCapacity capacity_fc(std::span<const Matrix> weights, std::span<const Matrix> reference) {
    FcCapacity c{0.0, norm_profile(weights, reference)};
    const auto& p = c.norms;
    const auto depth = weights.size();
    for (std::size_t i = 0; i + 1 < depth; ++i)
        if (p.spectral[i] == 0.0) throw SingularLayerError("layer " + std::to_string(i) + " has zero spectral norm");
    if (p.final_max_row == 0.0) throw SingularLayerError("final layer is zero");

    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < depth; ++i) sum += std::cbrt(std::pow(p.displacement_21[i] / p.spectral[i], 2.0));
    sum += std::cbrt(std::pow(p.frobenius.back() / p.final_max_row, 2.0));
    c.value = double(depth) * p.final_max_row * p.spectral_product * std::pow(sum, 1.5);
    return c;
}

inline std::vector<Matrix> weight_matrices(const LayerStack& stack) {
    std::vector<Matrix> out;
    for (const auto& l : stack.layers()) out.push_back(l.weights);
    return out;
}

/// Full linear map of a conv layer: row (oc * positions + pos) applies the
/// filter of channel oc at output position pos to the flattened input.
/// Dense layers unroll to themselves.
struct ConvUnrolled {
    Matrix matrix;
    ConvGeometry geometry;
    std::size_t out_channels = 0;
};

inline ConvUnrolled conv_unroll(const Layer& layer) {
    if (layer.kind == LayerKind::dense) return {layer.weights, {}, std::size_t(layer.weights.rows())};
    const auto& g = layer.geometry;
    if (!g.valid() || std::size_t(layer.weights.cols()) != g.patch_size())
        throw InputShapeError("conv filter matrix does not match its geometry");
    const auto ow = g.out_width();
    const auto positions = g.positions();
    const auto channels = std::size_t(layer.weights.rows());
    Matrix m = Matrix::Zero(Eigen::Index(channels * positions), Eigen::Index(g.input_size()));
    for (std::size_t oc = 0; oc < channels; ++oc) {
        for (std::size_t pos = 0; pos < positions; ++pos) {
            const auto oy = pos / ow, ox = pos % ow;
            const auto row = Eigen::Index(oc * positions + pos);
            Eigen::Index k = 0;
            for (std::size_t c = 0; c < g.in_channels; ++c)
                for (std::size_t ky = 0; ky < g.kernel_height; ++ky)
                    for (std::size_t kx = 0; kx < g.kernel_width; ++kx)
                        m(row, Eigen::Index((c * g.in_height + oy * g.stride + ky) * g.in_width + ox * g.stride + kx)) =
                            layer.weights(Eigen::Index(oc), k++);
        }
    }
    return {std::move(m), g, channels};
}

/// B_0..B_{L-1}: the largest Euclidean norm of any patch that layer i+1
/// reads from its input (the raw input for i = 0), over all inputs. A dense
/// layer reads a single patch, the whole vector.
inline std::vector<double> patch_norms(const LayerStack& stack, std::span<const Vector> inputs) {
    if (inputs.empty()) throw InputError("patch norms need at least one input");
    std::vector<double> b(stack.size(), 0.0);
    Matrix acts = as_columns(inputs);
    if (std::size_t(acts.rows()) != stack.input_dim()) throw InputShapeError("inputs do not match network input");
    for (std::size_t i = 0; i < stack.size(); ++i) {
        const Layer& layer = stack[i];
        for (Eigen::Index col = 0; col < acts.cols(); ++col) {
            const double norm = layer.kind == LayerKind::dense
                                    ? acts.col(col).norm()
                                    : extract_patches(layer.geometry, acts.col(col)).colwise().norm().maxCoeff();
            b[i] = std::max(b[i], norm);
        }
        acts = layer_preactivation(layer, acts);
        apply_activation(layer.activation, acts);
    }
    return b;
}

struct CnnCapacity {
    double value = 0.0;
    std::vector<double> terms;        // T_1..T_L
    std::vector<double> sigma_prime;  // ‖Ã^i‖_σ'
    std::vector<std::size_t> spatial_widths;
};

/// Capacity of a ReLU conv network without pooling: G = (Σ_i T_i^{2/3})^{3/2} with
///   T_i = B_{i-1} ‖(A^i−M^i)ᵀ‖_{2,1} √w_i · max_{i≤U<L} Π_{u=i+1..U} ‖Ã^u‖_σ / B_U   (i < L)
///   T_L = B_{L-1} ‖A^L − M^L‖_Fr / γ
/// The final-layer σ′ norm is the largest row norm of A^L (Lipschitz constant 1).
inline CnnCapacity capacity_cnn(const LayerStack& stack, std::span<const Matrix> reference,
                                std::span<const double> patch_norm, double gamma) {
    if (!(gamma > 0.0)) throw ParameterError("margin must be positive");
    const auto weights = weight_matrices(stack);
    check_reference(weights, reference);
    const auto depth = stack.size();
    if (patch_norm.size() != depth) throw InputShapeError("need one patch norm per layer");

    CnnCapacity c;
    for (std::size_t i = 0; i < depth; ++i) {
        c.spatial_widths.push_back(stack[i].positions());
        c.sigma_prime.push_back(i + 1 < depth ? spectral_norm(conv_unroll(stack[i]).matrix)
                                              : max_row_norm(weights[i]));
    }
    for (std::size_t u = 1; u < depth; ++u) {
        if (!(patch_norm[u] > 0.0))
            throw DegenerateInputError("patch norm B_" + std::to_string(u) + " is zero; activations vanish");
    }

    double sum = 0.0;
    for (std::size_t i = 0; i < depth; ++i) {
        double t = 0.0;
        if (i + 1 < depth) {
            // 0-based layer i is layer i+1 in 1-based terms; U ranges over layers i+1..L-1.
            double best = 0.0, product = 1.0;
            for (std::size_t u = i + 1; u < depth; ++u) {
                if (u > i + 1) product *= c.sigma_prime[u - 1];
                best = std::max(best, product / patch_norm[u]);
            }
            t = patch_norm[i] * norm_21((weights[i] - reference[i]).transpose()) *
                std::sqrt(double(c.spatial_widths[i])) * best;
        } else {
            t = patch_norm[i] * frobenius_norm(weights[i] - reference[i]) / gamma;
        }
        c.terms.push_back(t);
        sum += std::cbrt(t * t);
    }
    c.value = std::pow(sum, 1.5);
    return c;
}

/// Largest layer width counting all channels and positions.
inline std::size_t max_width(const LayerStack& stack) {
    std::size_t w = 0;
    for (const auto& l : stack.layers()) w = std::max(w, l.out_dim());
    return w;
}

enum class ReferenceKind { init, zero };

struct BoundOptions {
    double delta = 0.05;
    double gamma = 0.0;
    ReferenceKind reference = ReferenceKind::init;
};

inline constexpr const char* kBoundCaveat = "up to unspecified universal constants and logarithmic factors";

struct BoundReport {
    InputSetting setting = InputSetting::shared;
    bool convolutional = false;
    std::string capacity_name;  // "F_A" or "G_A"
    double source_risk = 0.0;   // shared setting only
    double mpa = 0.0;
    double empirical_part = 0.0;
    double capacity = 0.0;
    double max_input_norm = 0.0;
    double gamma = 0.0;
    double gamma_bar = 0.0;
    std::size_t sample_size = 0;
    std::size_t max_width = 0;
    double log_max_width = 0.0;
    double delta = 0.0;
    double complexity_term = 0.0;
    double confidence_term = 0.0;
    std::string reference;
    std::string head;  // which head realizes k* at gamma
    std::vector<double> layer_terms;  // T_i for conv, ‖A^i − M^i‖_{2,1} for dense
    std::string caveat = kBoundCaveat;
};

/// Assembles the right-hand side terms for the transferred network at margin
/// `gamma`, which must lie in (0, γ̄] of the outcome's feasibility report.
inline BoundReport assemble_bound_report(const TransferOutcome& outcome, std::span<const Vector> target_inputs,
                                         const BoundOptions& opt) {
    const auto& a = outcome.assumption;
    if (!(opt.delta > 0.0 && opt.delta < 1.0)) throw ParameterError("delta must lie in (0, 1)");
    if (!a.feasible || !(opt.gamma > 0.0) || opt.gamma > a.gamma_bar) {
        std::ostringstream msg;
        msg << "margin " << opt.gamma << " outside the feasible range (0, " << a.gamma_bar << "]"
            << (a.feasible ? "" : " (assumption infeasible)");
        throw ContractError(msg.str(), a.gamma_bar);
    }
    if (target_inputs.size() != outcome.target_n) throw InputShapeError("target inputs do not match the outcome");

    // k* at gamma: the head chosen at the smallest grid margin >= gamma.
    std::size_t k = 0;
    while (a.gamma_grid[k] < opt.gamma) ++k;
    const Network& net = outcome.selected_model(k);

    BoundReport r;
    r.setting = outcome.setting;
    r.convolutional = net.stack().has_conv();
    r.mpa = outcome.mpa.value();
    if (outcome.setting == InputSetting::shared) {
        r.source_risk = outcome.source_risk();
        r.empirical_part = r.source_risk + (1.0 - r.mpa);
    } else {
        r.empirical_part = 1.0 - r.mpa;
    }
    r.gamma = opt.gamma;
    r.gamma_bar = a.gamma_bar;
    r.delta = opt.delta;
    r.sample_size = outcome.target_n;
    r.max_width = max_width(net.stack());
    r.log_max_width = std::log(double(r.max_width));
    r.reference = opt.reference == ReferenceKind::init ? "init" : "zero";
    r.head = outcome.target_risks[k].candidate_selected ? "candidate" : "trained";
    for (const auto& x : target_inputs) r.max_input_norm = std::max(r.max_input_norm, x.norm());

    const auto weights = weight_matrices(net.stack());
    std::vector<Matrix> reference;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        reference.push_back(opt.reference == ReferenceKind::init ? outcome.target_init.matrices.at(i)
                                                                 : Matrix::Zero(weights[i].rows(), weights[i].cols()));
    }
    const double root_n = std::sqrt(double(r.sample_size));
    if (r.convolutional) {
        auto cap = capacity_cnn(net.stack(), reference, patch_norms(net.stack(), target_inputs), opt.gamma);
        r.capacity_name = "G_A";
        r.capacity = cap.value;
        r.layer_terms = cap.terms;
        r.complexity_term = r.capacity * r.log_max_width / root_n;
    } else {
        auto cap = capacity_fc(weights, reference);
        r.capacity_name = "F_A";
        r.capacity = cap.value;
        r.layer_terms = cap.norms.displacement_21;
        r.complexity_term = r.max_input_norm * r.capacity * r.log_max_width / (opt.gamma * root_n);
    }
    r.confidence_term = std::sqrt(std::log(1.0 / opt.delta) / double(r.sample_size));
    return r;
}

}  // namespace mpa
