#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cozinb");
    std::vector<char*> argv;
    for (std::string& a : args) argv.push_back(a.data());
    return cozinb::cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, '\t');) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

// One small corpus and one short fit shared by the tests below.
class Cli : public testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::path(testing::TempDir()) / "cozinb_cli_test";
        fs::remove_all(root_);
        fs::create_directories(root_);
        std::ofstream cfg(config());
        cfg << R"({"seed": 2, "K": 6, "d_h": 2, "d_l": 2, "encoder_hidden": [8], "decoder_hidden": [4],)"
            << R"( "max_epochs": 5, "tolerance": 0, "data": ")" << (root_ / "synth" / "corpus.tsv").string() << R"(",)"
            << R"( "synth": {"J": 20, "M": 15, "planted": {"K_star": 2, "target_mean_tml": 20}}})";
        cfg.close();
        ASSERT_EQ(run_cli({"sample", config().string(), "--output", (root_ / "synth").string()}), 0);
        ASSERT_EQ(run_cli({"fit", config().string(), "--output", model().string()}), 0);
    }
    static void TearDownTestSuite() { fs::remove_all(root_); }

    static fs::path config() { return root_ / "config.json"; }
    static fs::path model() { return root_ / "model"; }
    static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, SampleWritesCorpusAndTruth) {
    EXPECT_TRUE(fs::exists(root_ / "synth" / "corpus.tsv"));
    EXPECT_TRUE(fs::exists(root_ / "synth" / "truth" / "truth.json"));
    const json summary = json::parse(slurp(root_ / "synth" / "summary.json"));
    EXPECT_EQ(summary["samples"], 20);
}

TEST_F(Cli, FitWritesCheckpointAndTrace) {
    EXPECT_TRUE(fs::exists(model() / "checkpoint" / "manifest.json"));
    EXPECT_TRUE(fs::exists(model() / "config.json"));
    const auto rows = read_tsv(model() / "trace.tsv");
    ASSERT_EQ(rows.size(), 6u);
    EXPECT_EQ(rows[0][0], "epoch");
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][0], std::to_string(i));
}

TEST_F(Cli, RerunIsByteIdentical) {
    const fs::path again = root_ / "model_again";
    ASSERT_EQ(run_cli({"fit", config().string(), "--output", again.string()}), 0);
    EXPECT_EQ(slurp(again / "trace.tsv"), slurp(model() / "trace.tsv"));
    EXPECT_EQ(slurp(again / "checkpoint" / "eta.bin"), slurp(model() / "checkpoint" / "eta.bin"));
}

TEST_F(Cli, EvalReproducesValidationPerplexity) {
    const fs::path out = root_ / "eval";
    ASSERT_EQ(run_cli({"eval", model().string(), "--output", out.string(), "--top", "5"}), 0);
    const json result = json::parse(slurp(out / "eval.json"));
    const auto trace = read_tsv(model() / "trace.tsv");
    const double traced = std::stod(trace.back()[2]);
    ASSERT_TRUE(result["perplexity"].is_number());
    EXPECT_NEAR(result["perplexity"].get<double>(), traced, 1e-9 * traced);
    const json factors = json::parse(slurp(out / "factors.json"));
    ASSERT_EQ(factors["factors"].size(), 6u);
    for (const json& f : factors["factors"]) EXPECT_EQ(f["top"].size(), 5u);
}

TEST_F(Cli, ExportAndTransform) {
    ASSERT_EQ(run_cli({"export-factors", model().string(), (root_ / "f.json").string(), "--top", "3"}), 0);
    const json f = json::parse(slurp(root_ / "f.json"));
    EXPECT_EQ(f["factors"][0]["top"].size(), 3u);
    ASSERT_EQ(run_cli({"export-factors", model().string(), (root_ / "f.txt").string(), "--format", "tsv"}), 0);
    EXPECT_GT(fs::file_size(root_ / "f.txt"), 0u);
    const fs::path out = root_ / "transform";
    ASSERT_EQ(run_cli({"transform", model().string(), (root_ / "synth" / "corpus.tsv").string(), "--output",
                       out.string()}),
              0);
    EXPECT_GT(read_tsv(out / "sample_features.tsv").size(), 20u);
}

TEST_F(Cli, MissingDataExitsWithDataCode) {
    testing::internal::CaptureStderr();
    const int code = run_cli({"fit", config().string(), "--set", "data=/nonexistent/counts.tsv", "--output",
                              (root_ / "bad").string()});
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_EQ(code, cozinb::cli::kExitData);
    EXPECT_NE(err.find("/nonexistent/counts.tsv"), std::string::npos) << err;
}

TEST_F(Cli, MissingManifestExitsWithDataCode) {
    fs::create_directories(root_ / "empty_model");
    testing::internal::CaptureStderr();
    const int code = run_cli({"eval", (root_ / "empty_model").string()});
    testing::internal::GetCapturedStderr();
    EXPECT_EQ(code, cozinb::cli::kExitData);
}

TEST_F(Cli, BadConfigExitsWithConfigCode) {
    testing::internal::CaptureStderr();
    EXPECT_EQ(run_cli({"fit", config().string(), "--set", "K=-1"}), cozinb::cli::kExitConfig);
    EXPECT_EQ(run_cli({"fit", config().string(), "--set", "nonsense=3"}), cozinb::cli::kExitConfig);
    EXPECT_EQ(run_cli({"frobnicate"}), cozinb::cli::kExitConfig);
    testing::internal::GetCapturedStderr();
}

TEST_F(Cli, MeanTmlWarning) {
    testing::internal::CaptureStderr();
    ASSERT_EQ(run_cli({"sample", config().string(), "--output", (root_ / "synth_warn").string(), "--expect-mean-tml",
                       "1000"}),
              0);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_NE(err.find("warning"), std::string::npos) << err;
}
