#pragma once

// JSON documents: model files, training configs, transfer metrics, bound
// reports, suite specs and correlation results. Doubles are written by
// nlohmann::json's shortest round-trip formatter.

#include <nlohmann/json.hpp>

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mpa/bounds.hpp"
#include "mpa/error.hpp"
#include "mpa/experiment.hpp"
#include "mpa/tinynet.hpp"
#include "mpa/transfer.hpp"

namespace mpa {

using json = nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty() || !j.front().is_array() || j.front().empty())
        throw InputShapeError("weights must be a non-empty array of rows");
    Matrix m(Eigen::Index(j.size()), Eigen::Index(j.front().size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != std::size_t(m.cols())) throw InputShapeError("ragged weight matrix");
        for (std::size_t k = 0; k < j[i].size(); ++k) m(Eigen::Index(i), Eigen::Index(k)) = j[i][k].get<double>();
    }
    return m;
}

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "identity" || s == "linear") return Activation::identity;
    throw UnsupportedArchitectureError("activation '" + s + "' is not 1-Lipschitz-supported (relu|identity)");
}

inline json layer_to_json(const Layer& l) {
    json j{{"kind", l.kind == LayerKind::dense ? "dense" : "conv2d"},
           {"activation", to_string(l.activation)},
           {"weights", matrix_to_json(l.weights)}};
    if (l.kind == LayerKind::conv2d) {
        const auto& g = l.geometry;
        j["in_channels"] = g.in_channels;
        j["in_height"] = g.in_height;
        j["in_width"] = g.in_width;
        j["kernel_height"] = g.kernel_height;
        j["kernel_width"] = g.kernel_width;
        j["stride"] = g.stride;
    }
    return j;
}

inline Layer layer_from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    const auto act = activation_from_string(j.value("activation", std::string("relu")));
    Matrix w = matrix_from_json(j.at("weights"));
    if (kind == "dense") return Layer::dense(std::move(w), act);
    if (kind == "conv2d") {
        ConvGeometry g;
        g.in_channels = j.at("in_channels").get<std::size_t>();
        g.in_height = j.at("in_height").get<std::size_t>();
        g.in_width = j.at("in_width").get<std::size_t>();
        g.kernel_height = j.at("kernel_height").get<std::size_t>();
        g.kernel_width = j.at("kernel_width").get<std::size_t>();
        g.stride = j.value("stride", std::size_t{1});
        return Layer::conv(std::move(w), g, act);
    }
    if (kind.find("pool") != std::string::npos)
        throw UnsupportedArchitectureError("pooling layers are not supported");
    throw UnsupportedArchitectureError("unknown layer kind '" + kind + "'");
}

struct ModelFile {
    Network network;
    std::optional<InitSnapshot> init;
};

inline json model_to_json(const Network& net, const InitSnapshot* init = nullptr) {
    json j;
    j["layers"] = json::array();
    for (const auto& l : net.stack().layers()) j["layers"].push_back(layer_to_json(l));
    j["split_index"] = net.split_index();
    if (init) {
        j["init_weights"] = json::array();
        for (const auto& m : init->matrices) j["init_weights"].push_back(matrix_to_json(m));
    }
    return j;
}

/// Wraps nlohmann type/key errors into the library's error classes.
template <typename Fn>
auto parse_guard(const std::string& what, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error&) {
        throw;
    } catch (const json::exception& e) {
        throw InputShapeError(what + ": " + e.what());
    }
}

inline ModelFile model_from_json(const json& j) {
    return parse_guard("model file", [&] {
        std::vector<Layer> layers;
        for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
        LayerStack stack(std::move(layers));
        std::optional<InitSnapshot> init;
        if (j.contains("init_weights")) {
            InitSnapshot s;
            for (const auto& m : j.at("init_weights")) s.matrices.push_back(matrix_from_json(m));
            if (!s.matrices.empty() && !s.matches(stack))
                throw InputShapeError("init_weights do not mirror the layers");
            if (!s.matrices.empty()) init = std::move(s);
        }
        return ModelFile{Network(std::move(stack), j.at("split_index").get<std::size_t>()), std::move(init)};
    });
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    out << j.dump(2) << '\n';
}

inline json config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"decay_factor", c.decay_factor},
            {"decay_interval", c.decay_interval},
            {"momentum", c.momentum},
            {"seed", c.seed}};
}

inline TrainConfig config_from_json(const json& j) {
    return parse_guard("train config", [&] {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.decay_factor = j.value("decay_factor", c.decay_factor);
        c.decay_interval = j.value("decay_interval", c.decay_interval);
        c.momentum = j.value("momentum", c.momentum);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    });
}

inline json assumption_to_json(const AssumptionReport& a) {
    json lhs = json::array();
    for (std::size_t k = 0; k < a.gamma_grid.size(); ++k)
        lhs.push_back({{"gamma", a.gamma_grid[k]}, {"misses", a.candidate_misses[k]}, {"risk", a.candidate_risk(k)}});
    return {{"feasible", a.feasible},
            {"gamma_bar", a.gamma_bar},
            {"n", a.n},
            {"baseline_misses", a.baseline_misses},
            {"baseline_risk", a.baseline_risk()},
            {"candidate", a.candidate_description},
            {"candidate_margin_risks", lhs}};
}

inline AssumptionReport assumption_from_json(const json& j) {
    return parse_guard("assumption report", [&] {
        AssumptionReport a;
        a.feasible = j.at("feasible").get<bool>();
        a.gamma_bar = j.at("gamma_bar").get<double>();
        a.n = j.at("n").get<std::size_t>();
        a.baseline_misses = j.at("baseline_misses").get<std::size_t>();
        a.candidate_description = j.value("candidate", std::string{});
        for (const auto& p : j.at("candidate_margin_risks")) {
            a.gamma_grid.push_back(p.at("gamma").get<double>());
            a.candidate_misses.push_back(p.at("misses").get<std::size_t>());
        }
        return a;
    });
}

/// Everything in a TransferOutcome that is not a model or the label pairs.
inline json metrics_to_json(const TransferOutcome& o) {
    json risks = json::array();
    for (const auto& r : o.target_risks) {
        risks.push_back({{"gamma", r.gamma},
                         {"trained_misses", r.trained_misses},
                         {"candidate_misses", r.candidate_misses},
                         {"selected", r.candidate_selected ? "candidate" : "trained"},
                         {"risk", double(r.misses()) / double(o.target_n)}});
    }
    return {{"setting", to_string(o.setting)},
            {"config", config_to_json(o.config)},
            {"source_misses", o.source_misses},
            {"source_n", o.source_n},
            {"source_risk", o.source_risk()},
            {"target_n", o.target_n},
            {"mpa",
             {{"value", o.mpa.value()},
              {"agreements", o.mpa.agreements},
              {"n", o.mpa.n},
              {"num_source", o.pairs.num_source()},
              {"num_target", o.pairs.num_target()},
              {"mapping", o.mpa.predictor.mapping},
              {"computed_on", "train"}}},
            {"assumption", assumption_to_json(o.assumption)},
            {"target_margin_risks", risks}};
}

/// Rebuilds an outcome from its serialized parts. MPA is recomputed from
/// the pairs and must agree with the recorded numerator.
inline TransferOutcome outcome_from_parts(const json& metrics, const ModelFile& source, const ModelFile& target,
                                          const ModelFile& candidate, PairedLabelDataset pairs) {
    return parse_guard("metrics", [&] {
        if (!source.init || !target.init) throw InputShapeError("model files lack init_weights");
        auto mpa = compute_mpa_detailed(pairs);
        if (mpa.agreements != metrics.at("mpa").at("agreements").get<std::size_t>())
            throw InputError("pairs file disagrees with recorded MPA");
        std::vector<GridRisk> risks;
        for (const auto& r : metrics.at("target_margin_risks")) {
            risks.push_back({r.at("gamma").get<double>(), r.at("trained_misses").get<std::size_t>(),
                             r.at("candidate_misses").get<std::size_t>(),
                             r.at("selected").get<std::string>() == "candidate"});
        }
        const auto setting = metrics.at("setting").get<std::string>();
        return TransferOutcome{setting == "shared" ? InputSetting::shared : InputSetting::different,
                               config_from_json(metrics.at("config")),
                               source.network,
                               *source.init,
                               target.network,
                               candidate.network,
                               *target.init,
                               metrics.at("source_misses").get<std::size_t>(),
                               metrics.at("source_n").get<std::size_t>(),
                               metrics.at("target_n").get<std::size_t>(),
                               std::move(pairs),
                               std::move(mpa),
                               assumption_from_json(metrics.at("assumption")),
                               std::move(risks)};
    });
}

inline json bound_report_to_json(const BoundReport& r) {
    json j{{"setting", to_string(r.setting)},
           {"architecture", r.convolutional ? "convolutional" : "fully_connected"},
           {"empirical_part",
            {{"value", r.empirical_part},
             {"mpa", r.mpa},
             {"one_minus_mpa", 1.0 - r.mpa}}},
           {"capacity", {{"name", r.capacity_name}, {"value", r.capacity}, {"layer_terms", r.layer_terms}}},
           {"complexity_term", r.complexity_term},
           {"confidence_term", r.confidence_term},
           {"scale_factors",
            {{"max_input_norm", r.max_input_norm},
             {"gamma", r.gamma},
             {"sample_size", r.sample_size},
             {"max_width", r.max_width},
             {"log_max_width", r.log_max_width},
             {"delta", r.delta}}},
           {"gamma_bar", r.gamma_bar},
           {"reference", r.reference},
           {"head", r.head},
           {"up_to_constants", true},
           {"caveat", r.caveat}};
    if (r.setting == InputSetting::shared) j["empirical_part"]["source_risk"] = r.source_risk;
    return j;
}

inline json suite_to_json(const SyntheticTaskSuite& s) {
    return {{"dim", s.mixture.dim},
            {"num_source", s.mixture.num_source},
            {"components_per_label", s.mixture.components_per_label},
            {"separation", s.mixture.separation},
            {"n_train", s.n_train},
            {"n_heldout", s.n_heldout},
            {"num_target", s.num_target},
            {"alphas", s.alphas},
            {"tasks_per_alpha", s.tasks_per_alpha},
            {"extractor_widths", s.extractor_widths},
            {"head_widths", s.head_widths},
            {"seed", s.seed}};
}

inline SyntheticTaskSuite suite_from_json(const json& j) {
    return parse_guard("suite spec", [&] {
        SyntheticTaskSuite s;
        s.mixture.dim = j.value("dim", s.mixture.dim);
        s.mixture.num_source = j.value("num_source", s.mixture.num_source);
        s.mixture.components_per_label = j.value("components_per_label", s.mixture.components_per_label);
        s.mixture.separation = j.value("separation", s.mixture.separation);
        s.n_train = j.value("n_train", s.n_train);
        s.n_heldout = j.value("n_heldout", s.n_heldout);
        s.num_target = j.value("num_target", s.num_target);
        s.alphas = j.value("alphas", s.alphas);
        s.tasks_per_alpha = j.value("tasks_per_alpha", s.tasks_per_alpha);
        s.extractor_widths = j.value("extractor_widths", s.extractor_widths);
        s.head_widths = j.value("head_widths", s.head_widths);
        s.seed = j.value("seed", s.seed);
        for (double a : s.alphas)
            if (!(a >= 0.0 && a <= 1.0)) throw ParameterError("alignment values must lie in [0, 1]");
        if (s.num_target < 2) throw ParameterError("target tasks need at least 2 classes");
        return s;
    });
}

inline json correlation_to_json(const CorrelationResult& r, const SyntheticTaskSuite& suite, const TrainConfig& cfg) {
    json tasks = json::array();
    for (const auto& t : r.tasks) {
        tasks.push_back({{"task", t.index},
                         {"alpha", t.alpha},
                         {"mpa", t.mpa},
                         {"mpa_agreements", t.mpa_agreements},
                         {"accuracy", t.accuracy},
                         {"heldout_errors", t.heldout_errors}});
    }
    return {{"pearson_r", r.r},
            {"p_value", r.p},
            {"pairs", r.tasks.size()},
            {"seed", r.seed},
            {"n_train", r.n_train},
            {"n_heldout", r.n_heldout},
            {"source_train_risk", r.source_train_risk},
            {"mpa_computed_on", r.mpa_computed_on},
            {"suite", suite_to_json(suite)},
            {"config", config_to_json(cfg)},
            {"tasks", tasks}};
}

}  // namespace mpa
