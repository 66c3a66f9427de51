// mpa: command-line front end.
//
//   mpa score      labels.csv [--dummy --model M --inputs X]   -> mpa.json
//   mpa transfer   config.json                                 -> models, metrics, assumption report
//   mpa bounds     outcome_dir --gamma G [--delta D]           -> bound_report.json
//   mpa correlate  suite.json                                  -> correlation.json, pairs.csv
//   mpa replay     run.manifest.json                           -> re-run and compare output hashes
//
// Exit codes: 0 ok, 1 usage/other, 2 malformed CSV, 3 shape/config error,
// 4 training diverged, 5 margin outside feasible range, 6 degenerate input,
// 7 replay mismatch.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mpa/mpa.hpp"

namespace fs = std::filesystem;
using namespace mpa;

namespace {

enum Exit : int {
    kOk = 0,
    kUsage = 1,
    kCsv = 2,
    kShape = 3,
    kDiverged = 4,
    kGammaRange = 5,
    kDegenerate = 6,
    kReplayMismatch = 7,
};

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, std::size_t(in.gcount()));
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> grid;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            grid.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ParameterError("bad --gamma-grid entry '" + item + "'");
        }
    }
    validate_gamma_grid(grid);
    return grid;
}

/// Output bookkeeping for one command run.
struct Run {
    std::string command;
    std::vector<std::string> args;  // argv after the program name, without --out-dir
    fs::path out_dir;
    json resolved = json::object();
    std::vector<fs::path> inputs;
    std::vector<std::string> outputs;

    fs::path out(const std::string& name) {
        outputs.push_back(name);
        return out_dir / name;
    }

    void write_manifest() const {
        json m;
        m["command"] = command;
        m["args"] = args;
        m["working_directory"] = fs::current_path().string();
        m["resolved_config"] = resolved;
        m["inputs"] = json::object();
        for (const auto& p : inputs) m["inputs"][fs::absolute(p).string()] = sha256_file(p);
        m["outputs"] = json::object();
        for (const auto& o : outputs) m["outputs"][o] = sha256_file(out_dir / o);
        write_json_file((out_dir / (command + ".manifest.json")).string(), m);
    }
};

int cmd_score(Run& run, const std::string& labels_path, bool dummy, const std::string& model_path,
              const std::string& inputs_path, std::size_t num_source, std::size_t num_target) {
    run.inputs.push_back(labels_path);
    json result;
    if (dummy) {
        if (model_path.empty() || inputs_path.empty()) throw ParameterError("--dummy needs --model and --inputs");
        run.inputs.push_back(model_path);
        run.inputs.push_back(inputs_path);
        const auto model = model_from_json(read_json_file(model_path));
        auto in_x = csv::open(inputs_path);
        const auto xs = csv::read_vectors(in_x);
        auto in_t = csv::open(labels_path);
        const auto targets = csv::read_labels(in_t);
        for (const auto& x : xs)
            if (std::size_t(x.size()) != model.network.input_dim())
                throw InputShapeError("inputs have dimension " + std::to_string(x.size()) + ", model expects " +
                                      std::to_string(model.network.input_dim()));
        auto data = make_dummy_source(model.network, xs, targets, num_target);
        auto mpa = compute_mpa_detailed(data);
        result = {{"mpa", mpa.value()}, {"agreements", mpa.agreements}, {"n", data.size()},
                  {"m_S", data.num_source()}, {"m_T", data.num_target()}, {"mapping", mpa.predictor.mapping},
                  {"dummy", true}};
    } else {
        auto in = csv::open(labels_path);
        const auto data = csv::read_label_pairs(in, num_source, num_target);
        auto mpa = compute_mpa_detailed(data);
        result = {{"mpa", mpa.value()}, {"agreements", mpa.agreements}, {"n", data.size()},
                  {"m_S", data.num_source()}, {"m_T", data.num_target()}, {"mapping", mpa.predictor.mapping},
                  {"dummy", false}};
    }
    run.resolved = {{"dummy", dummy}, {"num_source", num_source}, {"num_target", num_target}};
    write_json_file(run.out("mpa.json").string(), result);
    std::cout << "mpa " << result["mpa"].get<double>() << " (n=" << result["n"] << ")\n";
    return kOk;
}

Network architecture_from_json(const json& arch, std::size_t input_dim, std::size_t num_source) {
    if (arch.contains("model")) return model_from_json(arch.at("model")).network;
    const auto extractor = arch.value("extractor_widths", std::vector<std::size_t>{32, 16});
    const auto head = arch.value("head_widths", std::vector<std::size_t>{16});
    return make_mlp(input_dim, extractor, head, num_source);
}

TransferTask task_from_json(const json& data, InputSetting setting, Run& run, std::uint64_t default_seed) {
    if (data.contains("synthetic")) {
        const auto& s = data.at("synthetic");
        LemmaInstance inst;
        inst.setting = setting;
        inst.seed = s.value("seed", default_seed);
        inst.mixture.dim = s.value("dim", inst.mixture.dim);
        inst.mixture.num_source = s.value("num_source", inst.mixture.num_source);
        inst.mixture.components_per_label = s.value("components_per_label", inst.mixture.components_per_label);
        inst.mixture.separation = s.value("separation", inst.mixture.separation);
        inst.n = s.value("n", inst.n);
        inst.p = s.value("p", inst.p);
        inst.num_target = s.value("num_target", inst.num_target);
        inst.alpha = s.value("alpha", inst.alpha);
        return build_task(inst);
    }
    TransferTask task;
    task.setting = setting;
    auto load_x = [&](const char* key) {
        const auto path = data.at(key).get<std::string>();
        run.inputs.push_back(path);
        auto in = csv::open(path);
        return csv::read_vectors(in);
    };
    auto load_y = [&](const char* key) {
        const auto path = data.at(key).get<std::string>();
        run.inputs.push_back(path);
        auto in = csv::open(path);
        return csv::read_labels(in);
    };
    task.source_inputs = load_x("source_inputs");
    task.source_labels = load_y("source_labels");
    if (setting == InputSetting::shared) {
        task.target_inputs = task.source_inputs;
    } else {
        task.target_inputs = load_x("target_inputs");
    }
    task.target_labels = load_y("target_labels");
    auto max_plus_one = [](const std::vector<Label>& v) { return *std::max_element(v.begin(), v.end()) + 1; };
    task.num_source = data.value("num_source", max_plus_one(task.source_labels));
    task.num_target = data.value("num_target", max_plus_one(task.target_labels));
    if (task.source_inputs.size() != task.source_labels.size())
        throw InputShapeError("source inputs and labels differ in length");
    return task;
}

int cmd_transfer(Run& run, const std::string& config_path, std::optional<std::uint64_t> seed,
                 std::optional<std::size_t> epochs, const std::string& grid_text) {
    run.inputs.push_back(config_path);
    const json cfg_json = read_json_file(config_path);
    return parse_guard("transfer config", [&] {
        TrainConfig cfg = config_from_json(cfg_json.value("train", json::object()));
        if (seed) cfg.seed = *seed;
        if (epochs) cfg.epochs = *epochs;
        std::vector<double> grid = cfg_json.value("gamma_grid", default_gamma_grid());
        if (!grid_text.empty()) grid = parse_grid(grid_text);
        validate_gamma_grid(grid);
        const auto setting_name = cfg_json.value("setting", std::string("shared"));
        if (setting_name != "shared" && setting_name != "different")
            throw ParameterError("setting must be 'shared' or 'different'");
        const auto setting = setting_name == "shared" ? InputSetting::shared : InputSetting::different;

        const auto task = task_from_json(cfg_json.at("data"), setting, run, cfg.seed);
        const auto arch = architecture_from_json(cfg_json.value("architecture", json::object()),
                                                 task.source_inputs.front().size(), task.num_source);
        run.resolved = {{"setting", setting_name}, {"train", config_to_json(cfg)}, {"gamma_grid", grid},
                        {"data", cfg_json.at("data")}, {"architecture", cfg_json.value("architecture", json::object())}};

        TransferOutcome outcome = run_transfer(task, arch, cfg, grid);

        write_json_file(run.out("source_model.json").string(), model_to_json(outcome.source_model, &outcome.source_init));
        write_json_file(run.out("target_model.json").string(), model_to_json(outcome.target_model, &outcome.target_init));
        write_json_file(run.out("candidate_model.json").string(),
                        model_to_json(outcome.candidate_model, &outcome.target_init));
        write_json_file(run.out("metrics.json").string(), metrics_to_json(outcome));
        write_json_file(run.out("assumption.json").string(), assumption_to_json(outcome.assumption));
        {
            std::ofstream f(run.out("pairs.csv"));
            csv::write_label_pairs(f, outcome.pairs);
        }
        {
            std::ofstream f(run.out("target_inputs.csv"));
            csv::write_vectors(f, task.target_inputs);
        }
        {
            std::ofstream f(run.out("target_labels.csv"));
            csv::write_labels(f, task.target_labels, "target_label");
        }
        const auto& a = outcome.assumption;
        std::cout << "source risk " << outcome.source_risk() << ", MPA " << outcome.mpa.value() << ", assumption "
                  << (a.feasible ? "feasible, gamma_bar " + csv::format_double(a.gamma_bar) : std::string("infeasible"))
                  << "\n";
        return int(kOk);
    });
}

int cmd_bounds(Run& run, const std::string& dir, double gamma, double delta, bool ref_zero) {
    const fs::path d(dir);
    for (const char* f : {"metrics.json", "source_model.json", "target_model.json", "candidate_model.json", "pairs.csv",
                          "target_inputs.csv"})
        run.inputs.push_back(d / f);
    const auto metrics = read_json_file((d / "metrics.json").string());
    auto pairs_in = csv::open((d / "pairs.csv").string());
    const auto m = metrics.at("mpa");
    auto pairs = csv::read_label_pairs(pairs_in, m.at("num_source").get<std::size_t>(), m.at("num_target").get<std::size_t>());
    const auto outcome = outcome_from_parts(metrics, model_from_json(read_json_file((d / "source_model.json").string())),
                                            model_from_json(read_json_file((d / "target_model.json").string())),
                                            model_from_json(read_json_file((d / "candidate_model.json").string())),
                                            std::move(pairs));
    auto x_in = csv::open((d / "target_inputs.csv").string());
    const auto inputs = csv::read_vectors(x_in);
    BoundOptions opt{delta, gamma, ref_zero ? ReferenceKind::zero : ReferenceKind::init};
    run.resolved = {{"gamma", gamma}, {"delta", delta}, {"reference", ref_zero ? "zero" : "init"}};
    const auto report = assemble_bound_report(outcome, inputs, opt);
    write_json_file(run.out("bound_report.json").string(), bound_report_to_json(report));
    std::cout << "empirical " << report.empirical_part << ", " << report.capacity_name << " " << report.capacity
              << ", complexity " << report.complexity_term << ", confidence " << report.confidence_term << " ("
              << report.caveat << ")\n";
    return kOk;
}

int cmd_correlate(Run& run, const std::string& suite_path, std::optional<std::uint64_t> seed,
                  std::optional<std::size_t> epochs) {
    run.inputs.push_back(suite_path);
    const auto j = read_json_file(suite_path);
    auto suite = suite_from_json(j);
    TrainConfig cfg = config_from_json(j.value("train", json::object()));
    if (seed) suite.seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    cfg.seed = suite.seed;
    run.resolved = {{"suite", suite_to_json(suite)}, {"train", config_to_json(cfg)}};
    const auto result = run_correlation_experiment(suite, cfg);
    write_json_file(run.out("correlation.json").string(), correlation_to_json(result, suite, cfg));
    std::ofstream f(run.out("pairs.csv"));
    f << "task,alpha,mpa,accuracy\n";
    for (const auto& t : result.tasks)
        f << t.index << ',' << csv::format_double(t.alpha) << ',' << csv::format_double(t.mpa) << ','
          << csv::format_double(t.accuracy) << '\n';
    f.close();
    std::cout << "pearson r " << result.r << ", p " << result.p << " over " << result.tasks.size() << " tasks\n";
    return kOk;
}

int run_cli(std::vector<std::string> args, std::optional<fs::path> forced_out_dir = std::nullopt);

int cmd_replay(const std::string& manifest_path, const std::string& out_dir) {
    const auto manifest = read_json_file(manifest_path);
    const auto args = manifest.at("args").get<std::vector<std::string>>();
    const auto cwd = fs::current_path();
    fs::path target = fs::absolute(out_dir.empty() ? fs::path(manifest_path).parent_path() / "replay" : fs::path(out_dir));
    fs::create_directories(target);
    fs::current_path(manifest.at("working_directory").get<std::string>());
    int code = 0;
    try {
        code = run_cli(args, target);
    } catch (...) {
        fs::current_path(cwd);
        throw;
    }
    fs::current_path(cwd);
    if (code != kOk) return code;
    bool same = true;
    for (const auto& [name, hash] : manifest.at("outputs").items()) {
        const auto now = sha256_file(target / name);
        const bool match = now == hash.get<std::string>();
        same &= match;
        std::cout << (match ? "identical " : "DIFFERS   ") << name << "\n";
    }
    return same ? kOk : kReplayMismatch;
}

int run_cli(std::vector<std::string> args, std::optional<fs::path> forced_out_dir) {
    CLI::App app{"Majority predictor accuracy, transfer runs and capacity reports"};
    app.require_subcommand(1);
    std::string out_dir = ".";

    auto* score = app.add_subcommand("score", "MPA of source/target label pairs");
    std::string labels, model, inputs;
    bool dummy = false;
    std::size_t num_source = 0, num_target = 0;
    score->add_option("labels", labels, "CSV of source_label,target_label (target_label only with --dummy)")->required();
    score->add_flag("--dummy", dummy, "derive source labels from --model predictions on --inputs");
    score->add_option("--model", model, "model JSON (with --dummy)");
    score->add_option("--inputs", inputs, "CSV of input vectors (with --dummy)");
    score->add_option("--num-source", num_source, "override m_S");
    score->add_option("--num-target", num_target, "override m_T");
    score->add_option("--out-dir", out_dir);

    auto* transfer = app.add_subcommand("transfer", "train source, check feasibility, retrain target head");
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::string grid;
    transfer->add_option("config", config, "transfer config JSON")->required();
    transfer->add_option("--seed", seed);
    transfer->add_option("--epochs", epochs);
    transfer->add_option("--gamma-grid", grid, "comma-separated increasing margins");
    transfer->add_option("--out-dir", out_dir);

    auto* bounds = app.add_subcommand("bounds", "capacity report for a transfer outcome");
    std::string outcome_dir;
    double gamma = 0.0, delta = 0.05;
    bool ref_zero = false;
    bounds->add_option("outcome", outcome_dir, "output directory of `mpa transfer`")->required();
    bounds->add_option("--gamma", gamma, "margin in (0, gamma_bar]")->required();
    bounds->add_option("--delta", delta, "confidence parameter");
    bounds->add_flag("--ref-zero", ref_zero, "use zero reference matrices instead of the init snapshot");
    bounds->add_option("--out-dir", out_dir);

    auto* correlate = app.add_subcommand("correlate", "MPA vs transferred accuracy over a synthetic suite");
    std::string suite;
    correlate->add_option("suite", suite, "suite spec JSON")->required();
    correlate->add_option("--seed", seed);
    correlate->add_option("--epochs", epochs);
    correlate->add_option("--out-dir", out_dir);

    auto* replay = app.add_subcommand("replay", "re-run a command from its manifest and compare outputs");
    std::string manifest;
    replay->add_option("manifest", manifest)->required();
    replay->add_option("--out-dir", out_dir);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    if (replay->parsed()) return cmd_replay(manifest, out_dir == "." ? "" : out_dir);

    Run run;
    run.out_dir = forced_out_dir ? *forced_out_dir : fs::path(out_dir);
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--out-dir") {
            ++i;
            continue;
        }
        if (args[i].rfind("--out-dir=", 0) == 0) continue;
        run.args.push_back(args[i]);
    }
    fs::create_directories(run.out_dir);

    int code = kOk;
    if (score->parsed()) {
        run.command = "score";
        code = cmd_score(run, labels, dummy, model, inputs, num_source, num_target);
    } else if (transfer->parsed()) {
        run.command = "transfer";
        code = cmd_transfer(run, config, seed, epochs, grid);
    } else if (bounds->parsed()) {
        run.command = "bounds";
        code = cmd_bounds(run, outcome_dir, gamma, delta, ref_zero);
    } else if (correlate->parsed()) {
        run.command = "correlate";
        code = cmd_correlate(run, suite, seed, epochs);
    }
    if (code == kOk) run.write_manifest();
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run_cli(args);
    } catch (const CsvError& e) {
        std::cerr << "error: malformed CSV, " << e.what() << "\n";
        return kCsv;
    } catch (const TrainingDivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDiverged;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << " (gamma_bar = " << e.gamma_bar() << ")\n";
        return kGammaRange;
    } catch (const DegenerateInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDegenerate;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kShape;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
}
