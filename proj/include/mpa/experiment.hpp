#pragma once

// Synthetic task suites, the MPA-vs-accuracy correlation study and the
// harness that checks the empirical-risk inequalities on trained instances.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mpa/error.hpp"
#include "mpa/labelstats.hpp"
#include "mpa/parallel.hpp"
#include "mpa/stats.hpp"
#include "mpa/tinynet.hpp"
#include "mpa/transfer.hpp"

namespace mpa {

/// Dense ReLU network: extractor widths, then head widths, then an identity
/// score layer with `outputs` rows. Weights are zero; they only fix shapes.
inline Network make_mlp(std::size_t input_dim, std::span<const std::size_t> extractor,
                        std::span<const std::size_t> head, std::size_t outputs) {
    if (extractor.empty()) throw InputShapeError("extractor needs at least one layer");
    std::vector<Layer> layers;
    auto prev = input_dim;
    for (auto w : extractor) {
        layers.push_back(Layer::dense(Matrix::Zero(Eigen::Index(w), Eigen::Index(prev)), Activation::relu));
        prev = w;
    }
    for (auto w : head) {
        layers.push_back(Layer::dense(Matrix::Zero(Eigen::Index(w), Eigen::Index(prev)), Activation::relu));
        prev = w;
    }
    layers.push_back(Layer::dense(Matrix::Zero(Eigen::Index(outputs), Eigen::Index(prev)), Activation::identity));
    return Network(LayerStack(std::move(layers)), extractor.size());
}

/// Gaussian mixture whose components determine the source label
/// (component mod m_S).
struct MixtureSpec {
    std::size_t dim = 16;
    std::size_t num_source = 4;
    std::size_t components_per_label = 2;
    double separation = 3.0;  // std-dev of component centers; unit noise
};

struct LabeledSample {
    std::vector<Vector> inputs;
    std::vector<Label> source_labels;
};

class MixtureSampler {
public:
    MixtureSampler(const MixtureSpec& spec, std::mt19937_64& rng) : spec_(spec) {
        if (spec.dim == 0 || spec.num_source == 0 || spec.components_per_label == 0)
            throw ParameterError("mixture needs positive dimension, labels and components");
        std::normal_distribution<double> normal(0.0, spec.separation);
        for (std::size_t k = 0; k < spec.num_source * spec.components_per_label; ++k) {
            Vector c(Eigen::Index(spec.dim));
            for (auto& v : c) v = normal(rng);
            centers_.push_back(std::move(c));
        }
    }

    LabeledSample sample(std::size_t n, std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> pick(0, centers_.size() - 1);
        std::normal_distribution<double> noise(0.0, 1.0);
        LabeledSample s;
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = pick(rng);
            Vector x = centers_[k];
            for (auto& v : x) v += noise(rng);
            s.inputs.push_back(std::move(x));
            s.source_labels.push_back(k % spec_.num_source);
        }
        return s;
    }

private:
    MixtureSpec spec_;
    std::vector<Vector> centers_;
};

/// Target labeling: with probability alpha the label is map[source], else
/// uniform over the target classes.
struct TargetRule {
    double alpha = 1.0;
    std::vector<Label> map;
    std::size_t num_target = 2;

    static TargetRule random(double alpha, std::size_t num_source, std::size_t num_target, std::mt19937_64& rng) {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alignment must lie in [0, 1]");
        std::vector<Label> perm(num_source);
        for (std::size_t s = 0; s < num_source; ++s) perm[s] = s;
        std::shuffle(perm.begin(), perm.end(), rng);
        TargetRule r{alpha, {}, num_target};
        for (auto p : perm) r.map.push_back(p % num_target);
        return r;
    }

    std::vector<Label> apply(std::span<const Label> source, std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        std::uniform_int_distribution<Label> any(0, num_target - 1);
        std::vector<Label> out;
        for (auto s : source) {
            const bool aligned = coin(rng) < alpha;
            const Label noise = any(rng);
            out.push_back(aligned ? map.at(s) : noise);
        }
        return out;
    }
};

/// Throws unless no vector of `a` equals a vector of `b` exactly.
inline void assert_disjoint(std::span<const Vector> a, std::span<const Vector> b) {
    auto less = [](const Vector& x, const Vector& y) {
        return std::lexicographical_compare(x.begin(), x.end(), y.begin(), y.end());
    };
    std::set<Vector, decltype(less)> seen(less);
    for (const auto& x : a) seen.insert(x);
    for (const auto& y : b)
        if (seen.count(y)) throw InputError("held-out/target inputs overlap the training inputs");
}

namespace detail {
inline std::mt19937_64 rng_for(std::uint64_t seed, std::uint64_t purpose) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(purpose), 0x5eedu};
    return std::mt19937_64(seq);
}
}  // namespace detail

struct SyntheticTaskSuite {
    MixtureSpec mixture;
    std::size_t n_train = 2000;
    std::size_t n_heldout = 2000;
    std::size_t num_target = 2;
    std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
    std::size_t tasks_per_alpha = 4;
    std::vector<std::size_t> extractor_widths{32, 16};
    std::vector<std::size_t> head_widths{16};
    std::uint64_t seed = 0;

    std::size_t task_count() const { return alphas.size() * tasks_per_alpha; }
    double task_alpha(std::size_t j) const { return alphas.at(j / tasks_per_alpha); }
    Network architecture() const { return make_mlp(mixture.dim, extractor_widths, head_widths, mixture.num_source); }
};

struct TaskResult {
    std::size_t index = 0;
    double alpha = 0.0;
    double mpa = 0.0;
    std::size_t mpa_agreements = 0;
    double accuracy = 0.0;  // held-out accuracy of k*∘w*
    std::size_t heldout_errors = 0;
};

struct CorrelationResult {
    std::vector<TaskResult> tasks;
    double r = 0.0;
    double p = 1.0;
    std::uint64_t seed = 0;
    std::size_t n_train = 0;
    std::size_t n_heldout = 0;
    double source_train_risk = 0.0;
    std::string mpa_computed_on = "train";
};

struct SuiteData {
    LabeledSample train;
    LabeledSample heldout;
    std::vector<std::vector<Label>> train_targets;
    std::vector<std::vector<Label>> heldout_targets;
};

/// Deterministic in suite.seed: shared inputs plus every task's labels.
inline SuiteData generate_suite(const SyntheticTaskSuite& suite) {
    auto rng = detail::rng_for(suite.seed, 1);
    MixtureSampler sampler(suite.mixture, rng);
    SuiteData d;
    d.train = sampler.sample(suite.n_train, rng);
    d.heldout = sampler.sample(suite.n_heldout, rng);
    for (std::size_t j = 0; j < suite.task_count(); ++j) {
        auto task_rng = detail::rng_for(suite.seed, 1000 + j);
        const auto rule = TargetRule::random(suite.task_alpha(j), suite.mixture.num_source, suite.num_target, task_rng);
        d.train_targets.push_back(rule.apply(d.train.source_labels, task_rng));
        d.heldout_targets.push_back(rule.apply(d.heldout.source_labels, task_rng));
    }
    return d;
}

/// Trains one source model on the shared inputs, then per task computes
/// MPA(T|S) on the training pairs, retrains a head on the frozen features,
/// and measures held-out accuracy. Tasks run in parallel; results are
/// ordered by task index.
inline CorrelationResult run_correlation_experiment(const SyntheticTaskSuite& suite, TrainConfig cfg) {
    if (suite.task_count() < 3) throw ParameterError("suite needs at least 3 target tasks");
    cfg.seed = suite.seed;
    const auto data = generate_suite(suite);
    assert_disjoint(data.train.inputs, data.heldout.inputs);

    const auto arch = suite.architecture();
    auto source = train_source(data.train.inputs, data.train.source_labels, arch, cfg);
    const LayerStack extractor = source.model.feature_extractor();
    const LayerStack source_head = source.model.head();
    const Matrix train_features = extractor.forward_batch(as_columns(data.train.inputs));
    const Matrix heldout_features = extractor.forward_batch(as_columns(data.heldout.inputs));

    CorrelationResult result;
    result.seed = suite.seed;
    result.n_train = suite.n_train;
    result.n_heldout = suite.n_heldout;
    result.source_train_risk =
        double(count_misclassified(source.model, data.train.inputs, data.train.source_labels)) / double(suite.n_train);
    result.tasks.resize(suite.task_count());

    parallel_for(suite.task_count(), [&](std::size_t j) {
        std::vector<LabelPair> pairs;
        for (std::size_t i = 0; i < suite.n_train; ++i)
            pairs.push_back({data.train.source_labels[i], data.train_targets[j][i]});
        const auto mpa = compute_mpa_detailed(PairedLabelDataset(std::move(pairs), suite.mixture.num_source, suite.num_target));

        TrainConfig task_cfg = cfg;
        task_cfg.seed = cfg.seed * 1000003ULL + j;
        LayerStack head = head_template(source_head, suite.num_target);
        auto init_rng = make_rng(task_cfg.seed, Stream::head_init);
        initialize(head, init_rng);
        try {
            train_head_on_features(head, train_features, data.train_targets[j], task_cfg);
        } catch (const TrainingDivergedError& e) {
            throw TrainingDivergedError(e.epoch(), "task " + std::to_string(j));
        }
        const auto errors = count_misclassified(head.forward_batch(heldout_features), data.heldout_targets[j]);

        auto& t = result.tasks[j];
        t.index = j;
        t.alpha = suite.task_alpha(j);
        t.mpa = mpa.value();
        t.mpa_agreements = mpa.agreements;
        t.heldout_errors = errors;
        t.accuracy = 1.0 - double(errors) / double(suite.n_heldout);
    });

    std::vector<double> mpas, accs;
    for (const auto& t : result.tasks) {
        mpas.push_back(t.mpa);
        accs.push_back(t.accuracy);
    }
    try {
        result.r = pearson_r(mpas, accs);
    } catch (const DegenerateInputError& e) {
        throw DegenerateInputError(std::string("suite design: ") + e.what() +
                                   " (MPA or accuracy constant across tasks; vary the alignment list)");
    }
    result.p = p_value(result.r, result.tasks.size());
    return result;
}

/// One seeded transfer instance for checking the risk inequalities.
struct LemmaInstance {
    InputSetting setting = InputSetting::shared;
    std::uint64_t seed = 0;
    MixtureSpec mixture;
    std::size_t n = 2000;  // source sample size
    std::size_t p = 2000;  // target sample size (different-inputs setting)
    std::size_t num_target = 2;
    double alpha = 0.5;
    std::vector<std::size_t> extractor_widths{32, 16};
    std::vector<std::size_t> head_widths{16};
    TrainConfig config;
    std::vector<double> gamma_grid = default_gamma_grid();

    /// Desk-scale defaults; alignment and m_S vary with the seed.
    static LemmaInstance make_default(std::uint64_t seed, InputSetting setting) {
        LemmaInstance inst;
        inst.setting = setting;
        inst.seed = seed;
        inst.config.seed = seed;
        inst.alpha = double(seed % 5) / 4.0;
        inst.mixture.num_source = seed % 2 ? 4 : 2;
        return inst;
    }
};

inline TransferTask build_task(const LemmaInstance& inst) {
    auto rng = detail::rng_for(inst.seed, 7);
    MixtureSampler sampler(inst.mixture, rng);
    auto rule = TargetRule::random(inst.alpha, inst.mixture.num_source, inst.num_target, rng);
    TransferTask task;
    task.setting = inst.setting;
    task.num_source = inst.mixture.num_source;
    task.num_target = inst.num_target;
    auto source = sampler.sample(inst.n, rng);
    task.source_inputs = source.inputs;
    task.source_labels = source.source_labels;
    if (inst.setting == InputSetting::shared) {
        task.target_inputs = source.inputs;
        task.target_labels = rule.apply(source.source_labels, rng);
    } else {
        auto target = sampler.sample(inst.p, rng);
        assert_disjoint(source.inputs, target.inputs);
        task.target_inputs = std::move(target.inputs);
        task.target_labels = rule.apply(target.source_labels, rng);
    }
    return task;
}

struct LemmaPoint {
    double gamma = 0.0;
    bool admissible = false;  // gamma <= γ̄ of a feasible assumption check
    std::size_t lhs_misses = 0;
    std::size_t rhs_misses = 0;  // numerator of the right-hand side
    bool holds = true;
};

enum class LemmaStatus { holds, violated, vacuous };

inline const char* to_string(LemmaStatus s) {
    switch (s) {
        case LemmaStatus::holds: return "holds";
        case LemmaStatus::violated: return "violated";
        case LemmaStatus::vacuous: return "vacuous";
    }
    return "?";
}

struct LemmaVerdict {
    LemmaStatus status = LemmaStatus::vacuous;
    InputSetting setting = InputSetting::shared;
    std::size_t n = 0;  // common denominator of both sides
    double gamma_bar = 0.0;
    double mpa = 0.0;
    double source_risk = 0.0;
    std::vector<LemmaPoint> points;
};

/// Compares target margin misses against
///   shared:    source misses + (n − MPA agreements)
///   different: p − MPA agreements (dummy source labels)
/// as integers over the common denominator, at every admissible grid margin.
inline LemmaVerdict check_lemma(const TransferOutcome& outcome) {
    LemmaVerdict v;
    v.setting = outcome.setting;
    v.n = outcome.target_n;
    v.gamma_bar = outcome.assumption.gamma_bar;
    v.mpa = outcome.mpa.value();
    v.source_risk = outcome.source_risk();
    const auto disagreements = outcome.mpa.n - outcome.mpa.agreements;
    const auto rhs = outcome.setting == InputSetting::shared ? outcome.source_misses + disagreements : disagreements;
    if (outcome.setting == InputSetting::shared && outcome.source_n != outcome.target_n)
        throw InputShapeError("shared-input outcome with differing sample sizes");

    bool any_admissible = false, violated = false;
    for (const auto& g : outcome.target_risks) {
        LemmaPoint pt;
        pt.gamma = g.gamma;
        pt.admissible = outcome.assumption.feasible && g.gamma <= outcome.assumption.gamma_bar;
        pt.lhs_misses = g.misses();
        pt.rhs_misses = rhs;
        pt.holds = pt.lhs_misses <= pt.rhs_misses;
        any_admissible |= pt.admissible;
        violated |= pt.admissible && !pt.holds;
        v.points.push_back(pt);
    }
    v.status = !any_admissible ? LemmaStatus::vacuous : violated ? LemmaStatus::violated : LemmaStatus::holds;
    return v;
}

inline LemmaVerdict verify_lemma(const LemmaInstance& inst) {
    const auto task = build_task(inst);
    const auto arch = make_mlp(inst.mixture.dim, inst.extractor_widths, inst.head_widths, inst.mixture.num_source);
    return check_lemma(run_transfer(task, arch, inst.config, inst.gamma_grid));
}

inline LemmaVerdict verify_lemma1(LemmaInstance inst) {
    inst.setting = InputSetting::shared;
    return verify_lemma(inst);
}

inline LemmaVerdict verify_lemma2(LemmaInstance inst) {
    inst.setting = InputSetting::different;
    return verify_lemma(inst);
}

}  // namespace mpa
