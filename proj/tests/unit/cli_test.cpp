// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "prednet/cli.hpp"
#include "temp_dir.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct outcome {
  int code;
  std::string out, err;
};

outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = prednet::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  const auto bytes = prednet::io::read_file(p);
  return json::parse(bytes.begin(), bytes.end());
}

std::string text_of(const fs::path& p) {
  const auto bytes = prednet::io::read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

/// One small dataset and one briefly trained model shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new prednet::testing::temp_dir();
    const auto d = (dir_->path() / "ds").string();
    auto r = run({"dataset", "gen", "--out", d, "--size", "8", "--count", "40", "--train", "30"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"train", "--data", d, "--out", (dir_->path() / "m.apnet").string(), "--out-dir",
             (dir_->path() / "train").string(), "--epochs", "1", "--batch", "10"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string data() { return (dir_->path() / "ds").string(); }
  static std::string model() { return (dir_->path() / "m.apnet").string(); }
  static fs::path path(const std::string& leaf) { return dir_->path() / leaf; }

  static prednet::testing::temp_dir* dir_;
};

prednet::testing::temp_dir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("prune-curve"), std::string::npos);
}

TEST(Cli, MissingOrUnknownSubcommandIsUsageError) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"dataset"}).code, 1);
}

TEST(Cli, UnknownFlagAndBadValuesAreUsageErrors) {
  EXPECT_EQ(run({"train", "--bogus"}).code, 1);
  EXPECT_EQ(run({"train", "--epochs", "many"}).code, 1);
  EXPECT_EQ(run({"regress-demo", "--basis", "chebyshev"}).code, 1);
  EXPECT_EQ(run({"robustness", "--optimizer", "sgd"}).code, 1);
  EXPECT_EQ(run({"dataset", "gen", "--attributes", "11"}).code, 1);
}

TEST(Cli, SemanticallyInvalidArgumentsAreUsageErrors) {
  prednet::testing::temp_dir dir;
  const auto r = run({"regress-demo", "--order", "2", "--index", "5", "--out-dir", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--index"), std::string::npos);
}

TEST(Cli, MissingInputsAreRuntimeErrors) {
  prednet::testing::temp_dir dir;
  const auto r = run({"eval", "--model", (dir.path() / "none.apnet").string(), "--data", dir.path().string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, ConfigFileSuppliesDefaultsAndFlagsOverrideIt) {
  prednet::testing::temp_dir dir;
  const auto cfg = dir.path() / "cfg.json";
  prednet::io::write_file(cfg, std::string(R"({"order": 2, "delta": 0.5, "basis": "fourier"})"));
  const auto out = dir.path() / "run";
  const auto r = run({"regress-demo", "--config", cfg.string(), "--delta", "0.25", "--out-dir", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto record = read_json(out / "run.json");
  EXPECT_EQ(record["command"], "regress-demo");
  EXPECT_EQ(record["config"]["order"], "2");
  EXPECT_EQ(record["config"]["delta"], "0.25");
  EXPECT_EQ(record["config"]["basis"], "fourier");
  EXPECT_NE(r.out.find("resolved config"), std::string::npos);
}

TEST(Cli, ConfigFileWithUnknownKeyOrBadJsonIsUsageError) {
  prednet::testing::temp_dir dir;
  const auto cfg = dir.path() / "cfg.json";
  prednet::io::write_file(cfg, std::string(R"({"colour": "blue"})"));
  EXPECT_EQ(run({"regress-demo", "--config", cfg.string()}).code, 1);
  prednet::io::write_file(cfg, std::string("{broken"));
  EXPECT_EQ(run({"regress-demo", "--config", cfg.string()}).code, 1);
  EXPECT_EQ(run({"regress-demo", "--config", (dir.path() / "missing.json").string()}).code, 1);
}

TEST(Cli, RegressDemoWritesReportCurvesAndChecksums) {
  prednet::testing::temp_dir dir;
  const auto r = run({"regress-demo", "--out-dir", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"locality_report.csv", "naive.dat", "legendre.dat", "fourier.dat", "run.json"})
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  const auto record = read_json(dir.path() / "run.json");
  const auto report = prednet::io::read_file(dir.path() / "locality_report.csv");
  EXPECT_EQ(record["artifacts"]["locality_report.csv"], prednet::io::hex32(prednet::io::crc32_of(report)));
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 4);
}

TEST(Cli, DatasetGenIsReproducible) {
  prednet::testing::temp_dir dir;
  const auto a = (dir.path() / "a").string(), b = (dir.path() / "b").string();
  ASSERT_EQ(run({"dataset", "gen", "--out", a, "--size", "8", "--count", "12", "--train", "8", "--seed", "3"}).code, 0);
  ASSERT_EQ(run({"dataset", "gen", "--out", b, "--size", "8", "--count", "12", "--train", "8", "--seed", "3"}).code, 0);
  EXPECT_EQ(text_of(fs::path(a) / "checksums.txt"), text_of(fs::path(b) / "checksums.txt"));
  EXPECT_EQ(read_json(fs::path(a) / "run.json")["artifacts"], read_json(fs::path(b) / "run.json")["artifacts"]);
  EXPECT_EQ(run({"dataset", "gen", "--out", a, "--count", "5", "--train", "9"}).code, 1);
}

TEST_F(CliPipeline, TrainWroteCheckpointLogAndProvenance) {
  EXPECT_TRUE(fs::exists(model()));
  const auto log = text_of(path("train") / "training_log.csv");
  EXPECT_EQ(log.rfind("epoch,loss_total,loss_bce,mask_l1,mean_acc\n", 0), 0u);
  const auto record = read_json(path("train") / "run.json");
  EXPECT_EQ(record["command"], "train");
  EXPECT_EQ(record["config"]["epochs"], "1");
  EXPECT_EQ(record["config"]["lambda"], "1e-05");
  EXPECT_TRUE(record["artifacts"].contains("training_log.csv"));
}

TEST_F(CliPipeline, EvalWritesPerAttributeAccuracy) {
  const auto r = run({"eval", "--model", model(), "--data", data(), "--out-dir", path("eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = text_of(path("eval") / "accuracy.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 8 + 1);
  EXPECT_NE(csv.find("\nmean,"), std::string::npos);
}

TEST_F(CliPipeline, AnalyzeWritesMatricesAndRankings) {
  const auto r = run({"analyze", "--model", model(), "--data", data(), "--out-dir", path("analyze").string(),
                      "--top", "2", "--samples", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"mask_stats.csv", "channel_correlation.csv", "attribute_correlation.csv",
                        "top_correlated_attributes.csv", "run.json"})
    EXPECT_TRUE(fs::exists(path("analyze") / f)) << f;
  const auto ranking = text_of(path("analyze") / "top_correlated_attributes.csv");
  EXPECT_EQ(std::count(ranking.begin(), ranking.end(), '\n'), 1 + 8 * 2);
}

TEST_F(CliPipeline, PruneCurveWritesSemanticAndRandomRowsPerSeed) {
  const auto r = run({"prune-curve", "--model", model(), "--data", data(), "--out-dir", path("curve").string(),
                      "--budgets", "8,64", "--seeds", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = text_of(path("curve") / "prune_curve.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2 * 2);
  EXPECT_EQ(run({"prune-curve", "--model", model(), "--data", data(), "--budgets", "8,x"}).code, 1);
  EXPECT_EQ(run({"prune-curve", "--model", model(), "--data", data(), "--budgets", "200",
                 "--out-dir", path("curve2").string()}).code, 1);
}

TEST_F(CliPipeline, RobustnessWritesOneRowPerSigmaAndTransform) {
  const auto r = run({"robustness", "--model", model(), "--data", data(), "--out-dir", path("robust").string(),
                      "--sigmas", "0,0.3", "--n", "1,2", "--beta", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = text_of(path("robust") / "robustness.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2);
}

TEST_F(CliPipeline, ServeAnswersUntilStopped) {
  prednet::cli::serve_hook = [](httplib::Server& server) {
    server.wait_until_ready();
    httplib::Client c("127.0.0.1", 18731);
    auto res = c.Get("/api/model/summary");
    EXPECT_TRUE(res && res->status == 200);
    server.stop();
  };
  const auto r = run({"serve", "--model", model(), "--data", data(), "--bind", "127.0.0.1:18731"});
  prednet::cli::serve_hook = nullptr;
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("serving on http://127.0.0.1:18731"), std::string::npos);
}

TEST_F(CliPipeline, ServeWithBadBindIsUsageError) {
  EXPECT_EQ(run({"serve", "--model", model(), "--data", data(), "--bind", "nowhere:abc"}).code, 1);
}
