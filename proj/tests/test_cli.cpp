#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mpa/mpa.hpp"

namespace fs = std::filesystem;
using namespace mpa;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(MPA_CLI) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("mpa_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }
    std::string write(const std::string& name, const std::string& text) const {
        std::ofstream(path(name)) << text;
        return path(name);
    }
    std::string write_json(const std::string& name, const json& j) const { return write(name, j.dump(2)); }
    json read(const std::string& name) const { return read_json_file(path(name)); }

    fs::path dir_;
};

json small_transfer_config(const std::string& setting, std::uint64_t seed) {
    return {{"setting", setting},
            {"train", {{"epochs", 8}, {"seed", seed}}},
            {"architecture", {{"extractor_widths", {16, 8}}, {"head_widths", {8}}}},
            {"data",
             {{"synthetic",
               {{"dim", 8}, {"num_source", 2}, {"num_target", 2}, {"alpha", 0.75}, {"n", 300}, {"p", 300}, {"seed", seed}}}}}};
}

/// Zero-weight conv template: 1x4x4 input, 2 filters of 2x2 (3x3 output), then dense.
json conv_architecture() {
    const json filters = json::array({json::array({0, 0, 0, 0}), json::array({0, 0, 0, 0})});
    json hidden = json::array();
    for (int i = 0; i < 6; ++i) hidden.push_back(std::vector<double>(18, 0.0));
    json out = json::array();
    for (int i = 0; i < 2; ++i) out.push_back(std::vector<double>(6, 0.0));
    return {{"layers",
             {{{"kind", "conv2d"},
               {"activation", "relu"},
               {"weights", filters},
               {"in_channels", 1},
               {"in_height", 4},
               {"in_width", 4},
               {"kernel_height", 2},
               {"kernel_width", 2},
               {"stride", 1}},
              {{"kind", "dense"}, {"activation", "relu"}, {"weights", hidden}},
              {{"kind", "dense"}, {"activation", "identity"}, {"weights", out}}}},
            {"split_index", 1}};
}

}  // namespace

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("score").code, 1);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ScoreExamples) {
    const auto csv = write("pairs.csv", "source_label,target_label\n0,0\n0,0\n0,1\n1,1\n");
    auto r = run("score " + csv + " --out-dir " + path("a"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto out = read("a/mpa.json");
    EXPECT_EQ(out["mpa"].get<double>(), 0.75);
    EXPECT_EQ(out["n"], 4);
    EXPECT_EQ(out["m_S"], 2);
    EXPECT_EQ(out["m_T"], 2);
    EXPECT_EQ(out["mapping"], json::array({0, 1}));
    EXPECT_TRUE(fs::exists(path("a/score.manifest.json")));

    const auto identity = write("identity.csv", "0,0\n1,1\n2,2\n1,1\n");
    ASSERT_EQ(run("score " + identity + " --out-dir " + path("b")).code, 0);
    EXPECT_EQ(read("b/mpa.json")["mpa"].get<double>(), 1.0);

    ASSERT_EQ(run("score " + identity + " --num-source 5 --num-target 4 --out-dir " + path("c")).code, 0);
    EXPECT_EQ(read("c/mpa.json")["m_S"], 5);
    EXPECT_EQ(read("c/mpa.json")["mapping"].size(), 5u);
}

TEST_F(Cli, ScoreRejectsMalformedCsv) {
    const auto header_only = write("h.csv", "source_label,target_label\n");
    EXPECT_EQ(run("score " + header_only + " --out-dir " + path("o")).code, 2);
    const auto bad = write("bad.csv", "0,0\n1,1\n1;0\n");
    const auto r = run("score " + bad + " --out-dir " + path("o"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("line 3"), std::string::npos) << r.output;
    const auto range = write("range.csv", "0,0\n4,1\n");
    EXPECT_EQ(run("score " + range + " --num-source 2 --out-dir " + path("o")).code, 3);
}

TEST_F(Cli, ScoreDummyLabels) {
    // Identity source model on one-hot inputs: dummy labels equal the inputs' hot index.
    Matrix id = Matrix::Identity(3, 3);
    std::vector<Layer> layers{Layer::dense(id, Activation::relu), Layer::dense(id, Activation::identity)};
    const Network net(LayerStack(std::move(layers)), 1);
    write_json("model.json", model_to_json(net));
    const auto inputs = write("x.csv", "1,0,0\n0,1,0\n0,0,1\n0,1,0\n");
    const auto labels = write("t.csv", "target_label\n1\n0\n0\n0\n");
    const auto r = run("score " + labels + " --dummy --model " + path("model.json") + " --inputs " + inputs +
                       " --out-dir " + path("o"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto out = read("o/mpa.json");
    EXPECT_EQ(out["dummy"], true);
    EXPECT_EQ(out["m_S"], 3);
    EXPECT_EQ(out["mpa"].get<double>(), 1.0);

    const auto wide = write("wide.csv", "1,0,0,0\n");
    const auto one = write("one.csv", "0\n");
    EXPECT_EQ(run("score " + one + " --dummy --model " + path("model.json") + " --inputs " + wide + " --out-dir " +
                  path("p"))
                  .code,
              3);
    EXPECT_EQ(run("score " + one + " --dummy --out-dir " + path("p")).code, 3);
}

TEST_F(Cli, TransferSmokeRunsAreDeterministic) {
    for (const auto& [setting, seed] : std::vector<std::pair<std::string, int>>{{"shared", 1}, {"different", 2}, {"shared", 3}}) {
        const auto cfg = write_json("cfg.json", small_transfer_config(setting, std::uint64_t(seed)));
        const auto out = "run_" + setting + std::to_string(seed);
        const auto r = run("transfer " + cfg + " --out-dir " + path(out));
        ASSERT_EQ(r.code, 0) << r.output;
        for (const char* f : {"source_model.json", "target_model.json", "candidate_model.json", "metrics.json",
                              "assumption.json", "pairs.csv", "target_inputs.csv", "target_labels.csv",
                              "transfer.manifest.json"})
            EXPECT_TRUE(fs::exists(path(out + "/" + f))) << f;
        const auto metrics = read(out + "/metrics.json");
        EXPECT_EQ(metrics["setting"], setting);
        EXPECT_EQ(metrics["config"]["seed"], seed);

        // Recorded MPA equals a recomputation from the pairs file.
        const auto s = run("score " + path(out + "/pairs.csv") + " --out-dir " + path(out + "/rescore"));
        ASSERT_EQ(s.code, 0);
        EXPECT_EQ(read(out + "/rescore/mpa.json")["agreements"], metrics["mpa"]["agreements"]);

        // Extractor frozen: the first split_index layers coincide.
        const auto src = read(out + "/source_model.json"), tgt = read(out + "/target_model.json");
        for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(src["layers"][l]["weights"], tgt["layers"][l]["weights"]);

        const auto replay = run("replay " + path(out + "/transfer.manifest.json") + " --out-dir " + path(out + "_again"));
        EXPECT_EQ(replay.code, 0) << replay.output;
    }
}

TEST_F(Cli, TransferZeroEpochsIsANoOp) {
    auto cfg = small_transfer_config("shared", 5);
    cfg["train"]["epochs"] = 0;
    ASSERT_EQ(run("transfer " + write_json("cfg.json", cfg) + " --out-dir " + path("o")).code, 0);
    const auto src = read("o/source_model.json");
    for (std::size_t l = 0; l < src["layers"].size(); ++l) EXPECT_EQ(src["layers"][l]["weights"], src["init_weights"][l]);
    const auto cand = read("o/candidate_model.json");
    const auto tgt = read("o/target_model.json");
    for (std::size_t l = 2; l < cand["layers"].size(); ++l) {
        EXPECT_EQ(cand["layers"][l]["weights"], cand["init_weights"][l]);
        EXPECT_EQ(tgt["layers"][l]["weights"], cand["init_weights"][l]);
    }
}

TEST_F(Cli, TransferOverridesAndErrors) {
    const auto cfg = write_json("cfg.json", small_transfer_config("shared", 1));
    ASSERT_EQ(run("transfer " + cfg + " --seed 9 --epochs 2 --gamma-grid 0.05,0.5 --out-dir " + path("o")).code, 0);
    const auto m = read("o/metrics.json");
    EXPECT_EQ(m["config"]["seed"], 9);
    EXPECT_EQ(m["config"]["epochs"], 2);
    ASSERT_EQ(m["assumption"]["candidate_margin_risks"].size(), 2u);
    EXPECT_EQ(m["assumption"]["candidate_margin_risks"][0]["gamma"], 0.05);
    EXPECT_EQ(m["assumption"]["candidate_margin_risks"][1]["gamma"], 0.5);

    EXPECT_EQ(run("transfer " + cfg + " --gamma-grid 0.5,0.1 --out-dir " + path("x")).code, 3);
    EXPECT_EQ(run("transfer " + cfg + " --gamma-grid abc --out-dir " + path("x")).code, 3);

    auto bad_split = small_transfer_config("shared", 1);
    auto arch = conv_architecture();
    arch["split_index"] = 3;
    bad_split["architecture"] = {{"model", arch}};
    bad_split["data"]["synthetic"]["dim"] = 16;
    EXPECT_EQ(run("transfer " + write_json("split.json", bad_split) + " --out-dir " + path("x")).code, 3);

    auto bad_setting = small_transfer_config("sideways", 1);
    EXPECT_EQ(run("transfer " + write_json("setting.json", bad_setting) + " --out-dir " + path("x")).code, 3);
    EXPECT_EQ(run("transfer " + write("broken.json", "{\"setting\": ") + " --out-dir " + path("x")).code, 3);

    // Inputs near the top of the double range overflow the first forward pass.
    std::ostringstream xs, ys;
    for (int i = 0; i < 40; ++i) {
        xs << (i % 2 ? 1e300 : -1e300) << ',' << 1e300 << '\n';
        ys << i % 2 << '\n';
    }
    const json diverge{{"setting", "shared"},
                       {"train", {{"epochs", 3}, {"learning_rate", 1e10}}},
                       {"architecture", {{"extractor_widths", {4}}, {"head_widths", json::array()}}},
                       {"data",
                        {{"source_inputs", write("hx.csv", xs.str())},
                         {"source_labels", write("hs.csv", ys.str())},
                         {"target_labels", path("hs.csv")}}}};
    const auto r = run("transfer " + write_json("diverge.json", diverge) + " --out-dir " + path("x"));
    EXPECT_EQ(r.code, 4) << r.output;
    EXPECT_NE(r.output.find("epoch"), std::string::npos);
}

TEST_F(Cli, TransferFromCsvFiles) {
    std::ostringstream xs, ys, ts;
    for (int i = 0; i < 120; ++i) {
        const int y = i % 2;
        const double c = y ? 2.0 : -2.0;
        xs << c + 0.01 * (i % 7) << ',' << c - 0.02 * (i % 5) << '\n';
        ys << y << '\n';
        ts << (i % 3 == 0 ? 1 - y : y) << '\n';
    }
    write("x.csv", xs.str());
    write("s.csv", ys.str());
    write("t.csv", ts.str());
    const json cfg{{"setting", "shared"},
                   {"train", {{"epochs", 5}}},
                   {"architecture", {{"extractor_widths", {4}}, {"head_widths", json::array()}}},
                   {"data",
                    {{"source_inputs", path("x.csv")}, {"source_labels", path("s.csv")}, {"target_labels", path("t.csv")}}}};
    const auto r = run("transfer " + write_json("cfg.json", cfg) + " --out-dir " + path("o"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto manifest = read("o/transfer.manifest.json");
    EXPECT_EQ(manifest["inputs"].size(), 4u);  // config plus three CSV files

    write("t.csv", "1\n0\nzz\n");
    EXPECT_EQ(run("transfer " + path("cfg.json") + " --out-dir " + path("p")).code, 2);
}

TEST_F(Cli, BoundsReportsAndContract) {
    const auto cfg = write_json("cfg.json", small_transfer_config("shared", 1));
    ASSERT_EQ(run("transfer " + cfg + " --out-dir " + path("t")).code, 0);
    const auto assumption = read("t/assumption.json");
    ASSERT_TRUE(assumption["feasible"].get<bool>());
    const double gamma_bar = assumption["gamma_bar"].get<double>();

    const auto bad = run("bounds " + path("t") + " --gamma " + std::to_string(gamma_bar * 3) + " --out-dir " + path("b"));
    EXPECT_EQ(bad.code, 5);
    EXPECT_NE(bad.output.find("gamma_bar"), std::string::npos) << bad.output;
    EXPECT_EQ(run("bounds " + path("t") + " --gamma 0 --out-dir " + path("b")).code, 5);

    const auto ok = run("bounds " + path("t") + " --gamma " + assumption["gamma_bar"].dump() + " --out-dir " + path("b"));
    ASSERT_EQ(ok.code, 0) << ok.output;
    const auto report = read("b/bound_report.json");
    EXPECT_EQ(report["up_to_constants"], true);
    EXPECT_EQ(report["capacity"]["name"], "F_A");
    EXPECT_EQ(report["reference"], "init");
    const auto metrics = read("t/metrics.json");
    EXPECT_EQ(report["empirical_part"]["value"].get<double>(),
              metrics["source_risk"].get<double>() + (1.0 - metrics["mpa"]["value"].get<double>()));

    // Recompute the capacity value from the serialized weights.
    const auto k = std::size_t(std::find(assumption["gamma_grid"].begin(), assumption["gamma_grid"].end(),
                                         assumption["gamma_bar"]) -
                               assumption["gamma_grid"].begin());
    const auto file = metrics["target_margin_risks"][k]["selected"] == "candidate" ? "t/candidate_model.json"
                                                                                      : "t/target_model.json";
    const auto model = model_from_json(read(file));
    const double fa = capacity_fc(weight_matrices(model.network.stack()), model.init->matrices).value;
    EXPECT_NEAR(report["capacity"]["value"].get<double>(), fa, 1e-12 * fa);

    ASSERT_EQ(run("bounds " + path("t") + " --gamma " + assumption["gamma_bar"].dump() + " --ref-zero --delta 0.1 --out-dir " +
                  path("z"))
                  .code,
              0);
    EXPECT_EQ(read("z/bound_report.json")["reference"], "zero");
    EXPECT_EQ(read("z/bound_report.json")["scale_factors"]["delta"], 0.1);
    EXPECT_EQ(run("bounds " + path("t") + " --gamma " + assumption["gamma_bar"].dump() + " --delta 1.5 --out-dir " + path("z")).code,
              3);

    EXPECT_EQ(run("replay " + path("b/bounds.manifest.json") + " --out-dir " + path("b2")).code, 0);
}

TEST_F(Cli, BoundsDifferentSettingAndConv) {
    const auto cfg = write_json("cfg.json", small_transfer_config("different", 2));
    ASSERT_EQ(run("transfer " + cfg + " --out-dir " + path("t")).code, 0);
    const auto a = read("t/assumption.json");
    ASSERT_TRUE(a["feasible"].get<bool>());
    ASSERT_EQ(run("bounds " + path("t") + " --gamma " + a["gamma_bar"].dump() + " --out-dir " + path("b")).code, 0);
    const auto report = read("b/bound_report.json");
    EXPECT_EQ(report["setting"], "different");
    EXPECT_FALSE(report["empirical_part"].contains("source_risk"));
    EXPECT_EQ(report["empirical_part"]["value"], report["empirical_part"]["one_minus_mpa"]);

    auto conv = small_transfer_config("shared", 4);
    conv["architecture"] = {{"model", conv_architecture()}};
    conv["data"]["synthetic"]["dim"] = 16;
    conv["train"]["epochs"] = 15;
    ASSERT_EQ(run("transfer " + write_json("conv.json", conv) + " --out-dir " + path("c")).code, 0);
    const auto ca = read("c/assumption.json");
    ASSERT_TRUE(ca["feasible"].get<bool>());
    const auto r = run("bounds " + path("c") + " --gamma " + ca["gamma_bar"].dump() + " --out-dir " + path("cb"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read("cb/bound_report.json")["capacity"]["name"], "G_A");
}

TEST_F(Cli, CorrelateAndDegenerateSuite) {
    const json degenerate{{"alphas", {1.0}}, {"tasks_per_alpha", 4}, {"n_train", 200}, {"n_heldout", 200}, {"train", {{"epochs", 2}}}};
    EXPECT_EQ(run("correlate " + write_json("d.json", degenerate) + " --out-dir " + path("d")).code, 6);

    const json suite{{"seed", 0}};
    const auto r = run("correlate " + write_json("s.json", suite) + " --out-dir " + path("s"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto out = read("s/correlation.json");
    EXPECT_GT(out["pearson_r"].get<double>(), 0.6);
    EXPECT_LT(out["p_value"].get<double>(), 0.05);
    EXPECT_EQ(out["tasks"].size(), 20u);
    std::ifstream pairs(path("s/pairs.csv"));
    std::string header;
    std::getline(pairs, header);
    EXPECT_EQ(header, "task,alpha,mpa,accuracy");

    const auto low = run("correlate " + write_json("s.json", suite) + " --epochs 0 --out-dir " + path("low"));
    EXPECT_TRUE(low.code == 0 || low.code == 6) << low.output;
}

TEST_F(Cli, ReplayDetectsMismatch) {
    const auto csv = write("pairs.csv", "0,0\n0,1\n1,1\n");
    ASSERT_EQ(run("score " + csv + " --out-dir " + path("a")).code, 0);
    EXPECT_EQ(run("replay " + path("a/score.manifest.json") + " --out-dir " + path("r")).code, 0);
    auto manifest = read("a/score.manifest.json");
    manifest["outputs"]["mpa.json"] = std::string(64, '0');
    write_json("a/score.manifest.json", manifest);
    const auto r = run("replay " + path("a/score.manifest.json") + " --out-dir " + path("r2"));
    EXPECT_EQ(r.code, 7);
    EXPECT_NE(r.output.find("DIFFERS"), std::string::npos);
}
