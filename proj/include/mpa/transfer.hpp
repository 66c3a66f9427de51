#pragma once

// Source training, frozen-extractor head training and the margin
// feasibility check against the composed majority-predictor baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mpa/error.hpp"
#include "mpa/labelstats.hpp"
#include "mpa/tinynet.hpp"

namespace mpa {

struct TrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    double decay_factor = 0.1;
    std::size_t decay_interval = 10;  // epochs
    double momentum = 0.9;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !(decay_factor > 0.0)) throw ParameterError("rates must be positive");
        if (decay_interval < 1) throw ParameterError("decay interval must be >= 1 epoch");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
    }
    double rate_at(std::size_t epoch) const {
        return learning_rate * std::pow(decay_factor, double(epoch / decay_interval));
    }
};

inline const std::vector<double>& default_gamma_grid() {
    static const std::vector<double> grid{0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};
    return grid;
}

/// Independent RNG streams derived from one seed.
enum class Stream : std::uint64_t { source_init = 1, source_shuffle, head_init, head_shuffle, candidate_shuffle };

inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream)};
    return std::mt19937_64(seq);
}

/// Re-draws every weight uniformly in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
inline void initialize(LayerStack& stack, std::mt19937_64& rng) {
    for (auto& layer : stack.layers()) {
        auto fan_in = double(layer.weights.cols());
        auto fan_out = double(layer.weights.rows());
        if (layer.kind == LayerKind::conv2d)
            fan_out *= double(layer.geometry.kernel_height * layer.geometry.kernel_width);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (Eigen::Index j = 0; j < layer.weights.cols(); ++j)
            for (Eigen::Index i = 0; i < layer.weights.rows(); ++i) layer.weights(i, j) = dist(rng);
    }
}

struct GradientResult {
    double loss = 0.0;  // mean cross-entropy
    std::vector<Matrix> weights;
};

/// Exact gradient of the mean softmax cross-entropy over a batch
/// (one sample per column) w.r.t. every weight matrix of the stack.
inline GradientResult gradient(const LayerStack& stack, const Matrix& inputs, std::span<const Label> labels) {
    if (inputs.cols() == 0) throw InputError("gradient of an empty batch");
    if (std::size_t(inputs.cols()) != labels.size()) throw InputShapeError("batch/label count mismatch");
    if (std::size_t(inputs.rows()) != stack.input_dim()) throw InputShapeError("batch has wrong input dimension");
    detail::check_label_range(labels, stack.output_dim());

    const auto depth = stack.size();
    std::vector<Matrix> acts(depth + 1), pre(depth);
    acts[0] = inputs;
    for (std::size_t l = 0; l < depth; ++l) {
        pre[l] = layer_preactivation(stack[l], acts[l]);
        acts[l + 1] = pre[l];
        apply_activation(stack[l].activation, acts[l + 1]);
    }

    const auto batch = double(inputs.cols());
    const Matrix& scores = acts[depth];
    Matrix delta(scores.rows(), scores.cols());
    double loss = 0.0;
    for (Eigen::Index b = 0; b < scores.cols(); ++b) {
        const double top = scores.col(b).maxCoeff();
        const Vector e = (scores.col(b).array() - top).exp().matrix();
        const double z = e.sum();
        const auto t = Eigen::Index(labels[std::size_t(b)]);
        loss += std::log(z) - (scores(t, b) - top);
        delta.col(b) = e / z;
        delta(t, b) -= 1.0;
    }
    delta /= batch;

    GradientResult out;
    out.loss = loss / batch;
    out.weights.resize(depth);
    for (std::size_t l = depth; l-- > 0;) {
        const Layer& layer = stack[l];
        if (layer.activation == Activation::relu) delta = (pre[l].array() > 0.0).select(delta, 0.0);
        if (layer.kind == LayerKind::dense) {
            out.weights[l] = delta * acts[l].transpose();
            if (l > 0) delta = layer.weights.transpose() * delta;
            continue;
        }
        const auto& g = layer.geometry;
        const auto positions = Eigen::Index(g.positions());
        const auto channels = layer.weights.rows();
        Matrix grad = Matrix::Zero(layer.weights.rows(), layer.weights.cols());
        Matrix below(l > 0 ? acts[l].rows() : 0, acts[l].cols());
        for (Eigen::Index b = 0; b < delta.cols(); ++b) {
            Matrix dy(channels, positions);
            for (Eigen::Index oc = 0; oc < channels; ++oc)
                dy.row(oc) = delta.col(b).segment(oc * positions, positions).transpose();
            grad.noalias() += dy * extract_patches(g, acts[l].col(b)).transpose();
            if (l > 0) below.col(b) = accumulate_patches(g, layer.weights.transpose() * dy);
        }
        out.weights[l] = std::move(grad);
        if (l > 0) delta = std::move(below);
    }
    return out;
}

/// Mean cross-entropy without gradients.
inline double cross_entropy(const LayerStack& stack, const Matrix& inputs, std::span<const Label> labels) {
    const Matrix scores = stack.forward_batch(inputs);
    double loss = 0.0;
    for (Eigen::Index b = 0; b < scores.cols(); ++b) {
        const double top = scores.col(b).maxCoeff();
        loss += std::log((scores.col(b).array() - top).exp().sum()) -
                (scores(Eigen::Index(labels[std::size_t(b)]), b) - top);
    }
    return loss / double(scores.cols());
}

/// Mini-batch SGD with momentum on the mean cross-entropy. Deterministic
/// given `shuffle_rng`'s state; the stack is updated in place.
inline void fit(LayerStack& stack, const Matrix& inputs, std::span<const Label> labels, const TrainConfig& cfg,
                std::mt19937_64& shuffle_rng) {
    cfg.validate();
    detail::check_labeled(std::size_t(inputs.cols()), labels.size());
    detail::check_label_range(labels, stack.output_dim());

    std::vector<Matrix> velocity;
    for (const auto& layer : stack.layers()) velocity.push_back(Matrix::Zero(layer.weights.rows(), layer.weights.cols()));

    const auto n = labels.size();
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::vector<Label> batch_labels;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double rate = cfg.rate_at(epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const auto stop = std::min(n, start + cfg.batch_size);
            const std::vector<Eigen::Index> idx(order.begin() + long(start), order.begin() + long(stop));
            batch_labels.clear();
            for (auto i : idx) batch_labels.push_back(labels[std::size_t(i)]);
            const Matrix batch = inputs(Eigen::all, idx);
            auto grad = gradient(stack, batch, batch_labels);
            if (!std::isfinite(grad.loss)) throw TrainingDivergedError(epoch);
            for (std::size_t l = 0; l < stack.size(); ++l) {
                velocity[l] = cfg.momentum * velocity[l] - rate * grad.weights[l];
                stack[l].weights += velocity[l];
            }
        }
        for (const auto& layer : stack.layers())
            if (!layer.weights.allFinite()) throw TrainingDivergedError(epoch);
    }
}

struct SourceTraining {
    Network model;
    InitSnapshot init;
};

/// Trains h*∘w* from a freshly initialized copy of `arch` (its weights only
/// provide shapes). The snapshot is taken before the first step.
inline SourceTraining train_source(std::span<const Vector> inputs, std::span<const Label> labels, const Network& arch,
                                   const TrainConfig& cfg) {
    cfg.validate();
    LayerStack stack = arch.stack();
    auto init_rng = make_rng(cfg.seed, Stream::source_init);
    initialize(stack, init_rng);
    InitSnapshot snapshot = InitSnapshot::capture(stack);
    auto shuffle_rng = make_rng(cfg.seed, Stream::source_shuffle);
    fit(stack, as_columns(inputs), labels, cfg, shuffle_rng);
    return {Network(std::move(stack), arch.split_index()), std::move(snapshot)};
}

/// Copies the shape of `head` with the final layer resized to `num_classes` outputs.
inline LayerStack head_template(const LayerStack& head, std::size_t num_classes) {
    std::vector<Layer> layers(head.layers().begin(), head.layers().end());
    auto& last = layers.back();
    if (last.kind != LayerKind::dense) throw UnsupportedArchitectureError("head must end with a dense layer");
    last.weights = Matrix::Zero(Eigen::Index(num_classes), last.weights.cols());
    return LayerStack(std::move(layers));
}

/// Trains `head` in place on frozen features (one sample per column).
inline void train_head_on_features(LayerStack& head, const Matrix& features, std::span<const Label> labels,
                                   const TrainConfig& cfg, Stream shuffle_stream = Stream::head_shuffle) {
    auto rng = make_rng(cfg.seed, shuffle_stream);
    fit(head, features, labels, cfg, rng);
}

/// Retrains a head on w*(x) with the extractor frozen. The extractor is
/// copied verbatim into the result; only head matrices receive updates.
inline Network train_target_head(const LayerStack& extractor, std::span<const Vector> inputs,
                                 std::span<const Label> labels, const LayerStack& head_shape, const TrainConfig& cfg) {
    cfg.validate();
    LayerStack head = head_shape;
    auto init_rng = make_rng(cfg.seed, Stream::head_init);
    initialize(head, init_rng);
    train_head_on_features(head, extractor.forward_batch(as_columns(inputs)), labels, cfg);
    return compose(extractor, head);
}

/// Outcome of scanning a margin grid for Assumption-1 feasibility.
struct AssumptionReport {
    bool feasible = false;
    double gamma_bar = 0.0;  // largest feasible grid margin, 0 if none
    std::vector<double> gamma_grid;
    std::vector<std::size_t> candidate_misses;  // margin misses of the candidate head per grid point
    std::size_t baseline_misses = 0;            // misses of f_mp∘h* on the target data
    std::size_t n = 0;
    std::string candidate_description;

    double baseline_risk() const { return double(baseline_misses) / double(n); }
    double candidate_risk(std::size_t k) const { return double(candidate_misses.at(k)) / double(n); }
};

inline void validate_gamma_grid(std::span<const double> grid) {
    if (grid.empty()) throw ParameterError("margin grid is empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] > 0.0) || !std::isfinite(grid[i])) throw ParameterError("margin grid entries must be positive");
        if (i > 0 && !(grid[i] > grid[i - 1])) throw ParameterError("margin grid must be strictly increasing");
    }
}

/// Misses of the composed classifier x -> f_mp(argmax h*(w*(x))).
inline std::size_t count_composed_misses(const Matrix& features, const LayerStack& source_head,
                                         const MajorityPredictor& f_mp, std::span<const Label> labels) {
    const Matrix scores = source_head.forward_batch(features);
    std::size_t misses = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        misses += f_mp(argmax_label(scores.col(Eigen::Index(i)))) != labels[i];
    return misses;
}

/// Fills the grid part of a report from precomputed candidate scores.
inline AssumptionReport scan_assumption(const Matrix& candidate_scores, std::span<const Label> labels,
                                        std::size_t baseline_misses, std::span<const double> grid) {
    validate_gamma_grid(grid);
    AssumptionReport r;
    r.gamma_grid.assign(grid.begin(), grid.end());
    r.baseline_misses = baseline_misses;
    r.n = labels.size();
    for (double g : grid) {
        const auto misses = count_margin_misses(candidate_scores, labels, g);
        r.candidate_misses.push_back(misses);
        if (misses <= baseline_misses) {
            r.feasible = true;
            r.gamma_bar = g;
        }
    }
    return r;
}

struct AssumptionCheck {
    AssumptionReport report;
    LayerStack candidate_head;  // k̄
    LayerStack candidate_init;  // k̄ before training
};

/// Trains a candidate head k̄ (same surrogate, 3x the epochs, fresh
/// h*-shaped init) and finds the largest grid margin at which its margin
/// risk does not exceed the risk of f_mp∘h*.
inline AssumptionCheck check_assumption1(const LayerStack& extractor, const LayerStack& source_head,
                                         const MajorityPredictor& f_mp, std::span<const Vector> inputs,
                                         std::span<const Label> labels, std::size_t num_target,
                                         std::span<const double> grid, const TrainConfig& cfg) {
    validate_gamma_grid(grid);
    detail::check_labeled(inputs.size(), labels.size());
    if (f_mp.mapping.size() != source_head.output_dim())
        throw InputShapeError("majority predictor domain does not match source head outputs");

    const Matrix features = extractor.forward_batch(as_columns(inputs));
    const auto baseline = count_composed_misses(features, source_head, f_mp, labels);

    LayerStack head = head_template(source_head, num_target);
    auto init_rng = make_rng(cfg.seed, Stream::head_init);
    initialize(head, init_rng);
    LayerStack init = head;
    TrainConfig long_cfg = cfg;
    long_cfg.epochs = 3 * cfg.epochs;
    train_head_on_features(head, features, labels, long_cfg, Stream::candidate_shuffle);

    AssumptionCheck out{scan_assumption(head.forward_batch(features), labels, baseline, grid), head, init};
    out.report.candidate_description = "cross-entropy SGD head, " + std::to_string(long_cfg.epochs) +
                                       " epochs, h*-shaped with " + std::to_string(num_target) + " outputs";
    return out;
}

enum class InputSetting { shared, different };

inline const char* to_string(InputSetting s) { return s == InputSetting::shared ? "shared" : "different"; }

/// Data for one run of the transfer procedure. In the shared setting the
/// target inputs must be the source inputs.
struct TransferTask {
    InputSetting setting = InputSetting::shared;
    std::vector<Vector> source_inputs;
    std::vector<Label> source_labels;
    std::vector<Vector> target_inputs;
    std::vector<Label> target_labels;
    std::size_t num_source = 0;
    std::size_t num_target = 0;
};

/// Target margin risk of k* at one grid margin. k* is the better of the
/// trained head (warm-started from k̄) and k̄ itself at that margin.
struct GridRisk {
    double gamma = 0.0;
    std::size_t trained_misses = 0;
    std::size_t candidate_misses = 0;
    bool candidate_selected = false;
    std::size_t misses() const { return candidate_selected ? candidate_misses : trained_misses; }
};

struct TransferOutcome {
    InputSetting setting = InputSetting::shared;
    TrainConfig config;
    Network source_model;
    InitSnapshot source_init;
    Network target_model;     // trained k*∘w*
    Network candidate_model;  // k̄∘w*
    InitSnapshot target_init;  // source extractor init + head init
    std::size_t source_misses = 0;
    std::size_t source_n = 0;
    std::size_t target_n = 0;
    PairedLabelDataset pairs;  // (s_i, t_i) or (dummy s̃_i, t_i)
    MpaResult mpa;
    AssumptionReport assumption;
    std::vector<GridRisk> target_risks;

    double source_risk() const { return double(source_misses) / double(source_n); }
    /// Network realizing k* at grid index k.
    const Network& selected_model(std::size_t k) const {
        return target_risks.at(k).candidate_selected ? candidate_model : target_model;
    }
};

/// Runs the full procedure: source training, MPA on label pairs (dummy
/// source labels in the different-inputs setting), the feasibility check,
/// and frozen-extractor head training.
inline TransferOutcome run_transfer(const TransferTask& task, const Network& arch, const TrainConfig& cfg,
                                    std::span<const double> grid) {
    validate_gamma_grid(grid);
    cfg.validate();
    if (task.setting == InputSetting::shared && task.source_inputs.size() != task.target_inputs.size())
        throw InputShapeError("shared-input setting requires identical input sets");
    if (arch.output_dim() != task.num_source)
        throw InputShapeError("architecture emits " + std::to_string(arch.output_dim()) + " scores, m_S is " +
                              std::to_string(task.num_source));
    detail::check_labeled(task.target_inputs.size(), task.target_labels.size());
    detail::check_label_range(task.target_labels, task.num_target);

    auto source = train_source(task.source_inputs, task.source_labels, arch, cfg);
    const auto source_misses = count_misclassified(source.model, task.source_inputs, task.source_labels);

    std::optional<PairedLabelDataset> pairs;
    if (task.setting == InputSetting::shared) {
        std::vector<LabelPair> v;
        for (std::size_t i = 0; i < task.source_labels.size(); ++i) v.push_back({task.source_labels[i], task.target_labels[i]});
        pairs.emplace(std::move(v), task.num_source, task.num_target);
    } else {
        pairs.emplace(make_dummy_source(source.model, task.target_inputs, task.target_labels, task.num_target));
    }
    auto mpa = compute_mpa_detailed(*pairs);

    const LayerStack extractor = source.model.feature_extractor();
    const LayerStack source_head = source.model.head();
    auto check = check_assumption1(extractor, source_head, mpa.predictor, task.target_inputs, task.target_labels,
                                   task.num_target, grid, cfg);

    const Matrix features = extractor.forward_batch(as_columns(task.target_inputs));
    LayerStack head = check.candidate_head;
    train_head_on_features(head, features, task.target_labels, cfg);

    const Matrix trained_scores = head.forward_batch(features);
    std::vector<GridRisk> risks;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        GridRisk r;
        r.gamma = grid[k];
        r.trained_misses = count_margin_misses(trained_scores, task.target_labels, grid[k]);
        r.candidate_misses = check.report.candidate_misses[k];
        r.candidate_selected = r.candidate_misses < r.trained_misses;
        risks.push_back(r);
    }

    InitSnapshot target_init;
    target_init.matrices.assign(source.init.matrices.begin(), source.init.matrices.begin() + long(arch.split_index()));
    for (const auto& l : check.candidate_init.layers()) target_init.matrices.push_back(l.weights);

    return TransferOutcome{task.setting,
                           cfg,
                           source.model,
                           std::move(source.init),
                           compose(extractor, head),
                           compose(extractor, check.candidate_head),
                           std::move(target_init),
                           source_misses,
                           task.source_labels.size(),
                           task.target_labels.size(),
                           std::move(*pairs),
                           std::move(mpa),
                           std::move(check.report),
                           std::move(risks)};
}

}  // namespace mpa
