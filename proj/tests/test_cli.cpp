#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "chameleon/cli.hpp"

using namespace chameleon;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        unsetenv(kOutputDirEnv);
        root_ = fs::temp_directory_path() / ("chameleon_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        config_ = root_ / "small.json";
        std::ofstream(config_) << R"({
            "corpus": {"synthetic": {"styles": 2, "per_style": 20, "min_len": 8, "max_len": 14}},
            "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 16},
            "pretrain": {"epochs": 1, "batch_size": 8},
            "train": {"epochs": 2, "batch_size": 8, "adapters": {"rank": 4}},
            "seeds": [1]
        })";
    }
    void TearDown() override { fs::remove_all(root_); }

    std::vector<std::string> base(const std::string& cmd, const std::string& out) const {
        return {cmd, "-c", config_.string(), "-o", (root_ / out).string()};
    }

    fs::path root_, config_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(invoke({}).code, cli::kUsageError);
    EXPECT_EQ(invoke({"frobnicate"}).code, cli::kUsageError);
    EXPECT_EQ(invoke({"train", "--epochs", "many"}).code, cli::kUsageError);
    auto r = invoke({"train", "-c", config_.string(), "-o", (root_ / "x").string(), "--set", "train.bogus=1"});
    EXPECT_EQ(r.code, cli::kUsageError);
    EXPECT_NE(r.err.find("train.bogus"), std::string::npos) << r.err;
    EXPECT_EQ(invoke({"--help"}).code, cli::kOk);
    auto v = invoke({"--version"});
    EXPECT_EQ(v.code, cli::kOk);
    EXPECT_NE(v.out.find(cli::kVersion), std::string::npos);
}

TEST_F(Cli, MissingCorpusFileReportsPath) {
    auto args = base("train", "missing");
    for (std::string s : {"corpus.source=file", "corpus.path=/no/such/corpus.txt", "pretrain.source=corpus"}) {
        args.push_back("--set");
        args.push_back(s);
    }
    auto r = invoke(args);
    EXPECT_EQ(r.code, cli::kUsageError);
    EXPECT_NE(r.err.find("/no/such/corpus.txt"), std::string::npos) << r.err;
}

TEST_F(Cli, DefaultsPrintsValidConfig) {
    auto r = invoke({"defaults"});
    ASSERT_EQ(r.code, cli::kOk);
    EXPECT_EQ(nlohmann::json::parse(r.out), config_to_json(ExperimentConfig{}));
}

TEST_F(Cli, PretrainWritesCheckpointAndImproves) {
    auto r = invoke(base("pretrain", "pt"));
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_TRUE(fs::exists(root_ / "pt" / "backbone.ckpt"));
    auto manifest = nlohmann::json::parse(slurp(root_ / "pt" / "manifest.json"));
    EXPECT_EQ(manifest["kind"], "chameleon-manifest");
    EXPECT_EQ(manifest["command"], "pretrain");
    const auto rows = lines(slurp(root_ / "pt" / "pretrain.jsonl"));
    auto last = nlohmann::json::parse(rows.back());
    EXPECT_LT(last["val_loss"].get<double>(), last["val_loss_initial"].get<double>());

    // Same config and seed: identical weights.
    auto again = invoke(base("pretrain", "pt2"));
    ASSERT_EQ(again.code, cli::kOk);
    auto a = TransformerBackbone::from_checkpoint(checkpoint::load(root_ / "pt" / "backbone.ckpt"));
    auto b = TransformerBackbone::from_checkpoint(checkpoint::load(root_ / "pt2" / "backbone.ckpt"));
    EXPECT_EQ(a.checksum(), b.checksum());
}

TEST_F(Cli, TrainFromCheckpointThenEvalMatches) {
    ASSERT_EQ(invoke(base("pretrain", "pt")).code, cli::kOk);
    const auto ckpt = (root_ / "pt" / "backbone.ckpt").string();
    auto args = base("train", "tr");
    args.insert(args.end(), {"--backbone", ckpt, "--regime", "static_lora", "--epochs", "3"});
    auto r = invoke(args);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const auto csv = lines(slurp(root_ / "tr" / "summary.csv"));
    ASSERT_EQ(csv.size(), 1u + 3u);
    EXPECT_EQ(csv[0], cli::kSummaryHeader);
    EXPECT_EQ(lines(slurp(root_ / "tr" / "metrics.jsonl")).size(), 3u);
    ASSERT_TRUE(fs::exists(root_ / "tr" / "adapters.ckpt"));

    auto eargs = base("eval", "ev");
    eargs.insert(eargs.end(), {"--backbone", ckpt, "--adapters", (root_ / "tr" / "adapters.ckpt").string()});
    auto e = invoke(eargs);
    ASSERT_EQ(e.code, cli::kOk) << e.err;
    auto ev = nlohmann::json::parse(lines(e.out).back());
    // Final CSV row holds the trained model's val loss; eval reloads f32 adapters.
    std::vector<std::string> fields;
    std::stringstream row(csv.back());
    for (std::string f; std::getline(row, f, ',');) fields.push_back(f);
    EXPECT_NEAR(ev["val_loss"].get<double>(), std::stod(fields[4]), 1e-4);
}

TEST_F(Cli, UnadaptedWritesNoAdapters) {
    auto args = base("train", "un");
    args.insert(args.end(), {"--regime", "unadapted"});
    auto r = invoke(args);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_FALSE(fs::exists(root_ / "un" / "adapters.ckpt"));
    const auto csv = lines(slurp(root_ / "un" / "summary.csv"));
    ASSERT_EQ(csv.size(), 2u);
    EXPECT_EQ(csv[1].substr(0, 12), "0,unadapted,");
}

TEST_F(Cli, CompareRowsAndReproducibleRerun) {
    auto args = base("compare", "cmp");
    args.insert(args.end(), {"1", "2", "--epochs", "1"});
    auto r = invoke(args);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    const std::string csv = slurp(root_ / "cmp" / "compare.csv");
    const auto rows = lines(csv);
    ASSERT_EQ(rows.size(), 1u + 6u);
    EXPECT_EQ(rows[0], "seed,regime,parameters,train_loss,val_loss,val_perplexity");
    EXPECT_NE(r.out.find("of 2 seeds"), std::string::npos) << r.out;
    auto report = nlohmann::json::parse(slurp(root_ / "cmp" / "compare.json"));
    ASSERT_EQ(report.at("backbone_checksum_before").size(), 2u);
    EXPECT_EQ(report["backbone_checksum_before"], report.at("backbone_checksum_after"));
    EXPECT_EQ(report.at("chameleon_wins").size(), 2u);

    // Rerun from the written manifest into a new directory.
    auto again = invoke({"compare", "-c", (root_ / "cmp" / "manifest.json").string(), "-o", (root_ / "cmp2").string()});
    ASSERT_EQ(again.code, cli::kOk) << again.err;
    EXPECT_EQ(slurp(root_ / "cmp2" / "compare.csv"), csv);
}

TEST_F(Cli, ClusterReportsKAndPurity) {
    auto args = base("cluster", "cl");
    args.insert(args.end(), {"--k", "2"});
    auto r = invoke(args);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    auto report = nlohmann::json::parse(slurp(root_ / "cl" / "clusters.json"));
    EXPECT_EQ(report["k"], 2);
    const double purity = report["purity"].get<double>();
    EXPECT_GE(purity, 0.5);
    EXPECT_LE(purity, 1.0);
    EXPECT_GT(purity, 0.9);
    std::size_t total = 0;
    for (auto s : report["sizes"]) total += s.get<std::size_t>();
    EXPECT_EQ(total, report["n"].get<std::size_t>());

    auto bad = base("cluster", "cl2");
    bad.insert(bad.end(), {"--k", "1000"});
    EXPECT_EQ(invoke(bad).code, cli::kRuntimeFailure);
}

TEST_F(Cli, OutputDirFromEnvironment) {
    setenv(kOutputDirEnv, (root_ / "envdir").c_str(), 1);
    auto r = invoke({"train", "-c", config_.string(), "--regime", "unadapted"});
    unsetenv(kOutputDirEnv);
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_TRUE(fs::exists(root_ / "envdir" / "summary.csv"));
}
