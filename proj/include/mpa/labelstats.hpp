#pragma once

// Empirical source/target label statistics and the majority predictor.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpa/error.hpp"
#include "mpa/tinynet.hpp"

namespace mpa {

struct LabelPair {
    Label source;
    Label target;
    friend bool operator==(const LabelPair&, const LabelPair&) = default;
};

/// Aligned (source label, target label) pairs with dense 0-based labels.
class PairedLabelDataset {
public:
    PairedLabelDataset(std::vector<LabelPair> pairs, std::size_t num_source, std::size_t num_target)
        : pairs_(std::move(pairs)), num_source_(num_source), num_target_(num_target) {
        if (pairs_.empty()) throw InputError("paired label dataset is empty");
        for (std::size_t i = 0; i < pairs_.size(); ++i) {
            if (pairs_[i].source >= num_source_ || pairs_[i].target >= num_target_) {
                throw InputError("label pair " + std::to_string(i) + " out of range (m_S=" +
                                 std::to_string(num_source_) + ", m_T=" +
                                 std::to_string(num_target_) + ")");
            }
        }
    }

    /// Infers m_S and m_T as max label + 1.
    static PairedLabelDataset from_pairs(std::vector<LabelPair> pairs) {
        Label ms = 0, mt = 0;
        for (const auto& p : pairs) {
            ms = std::max(ms, p.source + 1);
            mt = std::max(mt, p.target + 1);
        }
        return {std::move(pairs), ms, mt};
    }

    std::size_t size() const noexcept { return pairs_.size(); }
    std::size_t num_source() const noexcept { return num_source_; }
    std::size_t num_target() const noexcept { return num_target_; }
    std::span<const LabelPair> pairs() const noexcept { return pairs_; }

private:
    std::vector<LabelPair> pairs_;
    std::size_t num_source_;
    std::size_t num_target_;
};

/// Integer contingency table of (source, target) label co-occurrences.
/// Probabilities are never materialized; argmax decisions compare counts.
class EmpiricalJoint {
public:
    EmpiricalJoint(std::size_t num_source, std::size_t num_target)
        : num_source_(num_source), num_target_(num_target), counts_(num_source * num_target, 0) {}

    std::uint64_t count(Label s, Label t) const { return counts_[s * num_target_ + t]; }
    std::uint64_t& count(Label s, Label t) { return counts_[s * num_target_ + t]; }

    std::uint64_t row_total(Label s) const {
        std::uint64_t total = 0;
        for (Label t = 0; t < num_target_; ++t) total += count(s, t);
        return total;
    }
    std::uint64_t column_total(Label t) const {
        std::uint64_t total = 0;
        for (Label s = 0; s < num_source_; ++s) total += count(s, t);
        return total;
    }

    std::size_t num_source() const noexcept { return num_source_; }
    std::size_t num_target() const noexcept { return num_target_; }
    std::uint64_t total() const noexcept { return total_; }

    double joint(Label s, Label t) const { return double(count(s, t)) / double(total_); }
    double source_marginal(Label s) const { return double(row_total(s)) / double(total_); }
    /// Undefined (throws) when the source label was never observed.
    double conditional(Label t, Label s) const {
        const auto row = row_total(s);
        if (row == 0) throw ParameterError("P(t|s) undefined: source label " + std::to_string(s) + " unobserved");
        return double(count(s, t)) / double(row);
    }

private:
    friend EmpiricalJoint empirical_joint(const PairedLabelDataset&);
    std::size_t num_source_;
    std::size_t num_target_;
    std::uint64_t total_ = 0;
    std::vector<std::uint64_t> counts_;
};

inline EmpiricalJoint empirical_joint(const PairedLabelDataset& data) {
    EmpiricalJoint joint(data.num_source(), data.num_target());
    for (const auto& p : data.pairs()) ++joint.count(p.source, p.target);
    joint.total_ = data.size();
    return joint;
}

/// f_mp: source label -> most frequent co-occurring target label.
struct MajorityPredictor {
    std::vector<Label> mapping;

    Label operator()(Label s) const { return mapping.at(s); }
};

namespace detail {
// First index attaining the maximum.
template <typename Count>
Label first_argmax(std::span<const Count> values) {
    return Label(std::max_element(values.begin(), values.end()) - values.begin());
}
}  // namespace detail

/// Row-wise argmax of counts, ties to the lowest target index. Source labels
/// with no observations fall back to the global modal target label.
inline MajorityPredictor fit_majority_predictor(const EmpiricalJoint& joint) {
    const auto ms = joint.num_source();
    const auto mt = joint.num_target();
    std::vector<std::uint64_t> column(mt);
    for (Label t = 0; t < mt; ++t) column[t] = joint.column_total(t);
    const Label global_mode = detail::first_argmax<std::uint64_t>(column);

    MajorityPredictor f;
    f.mapping.resize(ms);
    std::vector<std::uint64_t> row(mt);
    for (Label s = 0; s < ms; ++s) {
        for (Label t = 0; t < mt; ++t) row[t] = joint.count(s, t);
        f.mapping[s] = joint.row_total(s) == 0 ? global_mode : detail::first_argmax<std::uint64_t>(row);
    }
    return f;
}

/// Number of pairs whose target equals f(source).
inline std::size_t count_agreements(const PairedLabelDataset& data, const MajorityPredictor& f) {
    std::size_t hits = 0;
    for (const auto& p : data.pairs()) hits += (f(p.source) == p.target);
    return hits;
}

struct MpaResult {
    MajorityPredictor predictor;
    std::size_t agreements = 0;
    std::size_t n = 0;
    double value() const { return double(agreements) / double(n); }
};

/// MPA with its exact numerator, for callers that compare risks as rationals.
inline MpaResult compute_mpa_detailed(const PairedLabelDataset& data) {
    MpaResult r;
    r.predictor = fit_majority_predictor(empirical_joint(data));
    r.agreements = count_agreements(data, r.predictor);
    r.n = data.size();
    return r;
}

inline double compute_mpa(const PairedLabelDataset& data) { return compute_mpa_detailed(data).value(); }

/// Pairs each target input's hard source-model prediction (the dummy source
/// label) with its target label. `num_target == 0` infers m_T from the labels.
inline PairedLabelDataset make_dummy_source(const Network& source_model,
                                            std::span<const Vector> target_inputs,
                                            std::span<const Label> target_labels,
                                            std::size_t num_target = 0) {
    if (target_inputs.size() != target_labels.size()) {
        throw InputShapeError("dummy source: " + std::to_string(target_inputs.size()) + " inputs vs " +
                              std::to_string(target_labels.size()) + " labels");
    }
    const auto ms = source_model.output_dim();
    std::vector<LabelPair> pairs;
    pairs.reserve(target_inputs.size());
    Label mt = 0;
    for (std::size_t i = 0; i < target_inputs.size(); ++i) {
        pairs.push_back({predict_label(source_model, target_inputs[i]), target_labels[i]});
        mt = std::max(mt, target_labels[i] + 1);
    }
    return {std::move(pairs), ms, num_target == 0 ? mt : num_target};
}

}  // namespace mpa
