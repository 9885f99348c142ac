// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "fixtures.hpp"
#include "prednet/service.hpp"

using namespace prednet;
using json = nlohmann::json;

namespace {

/// In-process server on an ephemeral port around a network with channels 10 and 90 duplicated.
class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto net = prednet::testing::random_net(8, 40);
    prednet::testing::duplicate_channel(net, 10, 90);
    net.attribute_names = prednet::testing::tiny_dataset().manifest().attribute_names;
    service::session_options opt;
    opt.analysis_samples = 16;
    opt.accuracy_samples = 12;
    session_ = std::make_unique<service::session>(net, prednet::testing::tiny_dataset(), opt);
    service::register_routes(server_, *session_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(120, 0);
  }

  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  json get(const std::string& path, int expect = 200) {
    auto res = client_->Get(path);
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << path << ": " << res->body;
    return json::parse(res->body);
  }

  json post(const std::string& path, const json& body, int expect = 200) {
    auto res = client_->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << path << ": " << res->body;
    return json::parse(res->body);
  }

  std::unique_ptr<service::session> session_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

}  // namespace

TEST_F(ServiceTest, SummaryDescribesModelAndDataset) {
  const auto j = get("/api/model/summary");
  EXPECT_EQ(j["version"], 0);
  EXPECT_EQ(j["attributes"], 8);
  EXPECT_EQ(j["channels"], 128);
  EXPECT_EQ(j["image"]["height"], 8);
  EXPECT_EQ(j["dataset"]["count"], 48);
  EXPECT_TRUE(j["pruned_channels"].empty());
}

TEST_F(ServiceTest, AttributesCarryCorrelationGroups) {
  const auto j = get("/api/attributes");
  ASSERT_EQ(j["attributes"].size(), 8u);
  EXPECT_EQ(j["attributes"][0]["name"], "red_object");
  EXPECT_FALSE(j["attributes"][0]["correlation_group"].is_null());
}

TEST_F(ServiceTest, MaskEndpointMatchesLibraryAndZeroesPrunedChannels) {
  auto j = get("/api/masks/2?sample=3");
  ASSERT_EQ(j["shape"], json({128, 8, 8}));
  const auto& rec = session_->dataset()[3];
  const auto& model = session_->current()->model;
  const auto expected = compute_mask(model, forward_features(model, data::image_to_batch(rec.image)), 2);
  const auto data = j["data"].get<std::vector<float>>();
  ASSERT_EQ(data.size(), expected.size());
  for (std::size_t i = 0; i < data.size(); ++i) ASSERT_EQ(data[i], expected[i]);

  post("/api/prune", {{"channels", {4}}});
  j = get("/api/masks/2?sample=3");
  const auto pruned = j["data"].get<std::vector<float>>();
  for (std::size_t i = 4 * 64; i < 5 * 64; ++i) EXPECT_EQ(pruned[i], 0.0f);
  EXPECT_EQ(j["pruned_channels"], json({4}));
}

TEST_F(ServiceTest, MaskEndpointRejectsBadRequests) {
  get("/api/masks/9?sample=0", 404);
  get("/api/masks/0?sample=999", 404);
  get("/api/masks/0", 400);
  get("/api/masks/0?sample=abc", 400);
}

TEST_F(ServiceTest, CorrelationsAreSymmetricAndFlagTheDuplicatedPair) {
  const auto j = get("/api/correlations?axis=channel");
  ASSERT_EQ(j["size"], 128);
  const auto& d = j["data"];
  EXPECT_NEAR(d[10 * 128 + 90].get<double>(), 1.0, 1e-12);
  for (std::size_t a = 0; a < 128; a += 7)
    for (std::size_t b = 0; b < 128; b += 5) EXPECT_EQ(d[a * 128 + b], d[b * 128 + a]);
  const auto attrs = get("/api/correlations?axis=attribute");
  EXPECT_EQ(attrs["size"], 8);
  EXPECT_EQ(attrs["labels"][1], "warm_object");
  get("/api/correlations?axis=pixel", 400);
}

TEST_F(ServiceTest, MaskStatsHaveOneRowPerAttribute) {
  const auto j = get("/api/maskstats");
  EXPECT_EQ(j["shape"], json({8, 128}));
  EXPECT_EQ(j["samples"], 16);
  EXPECT_EQ(j["data"].size(), 8u * 128u);
}

TEST_F(ServiceTest, SemanticPlanPrunesOneMemberOfTheDuplicatedPair) {
  const auto plan = post("/api/prune/plan", {{"budget", 1}, {"strategy", "semantic"}});
  ASSERT_EQ(plan["channels"].size(), 1u);
  const auto ch = plan["channels"][0].get<int>();
  EXPECT_TRUE(ch == 10 || ch == 90) << plan.dump();
  EXPECT_EQ(plan["entries"][0]["reason"], "correlated_pair");
  const auto random = post("/api/prune/plan", {{"budget", 5}, {"strategy", "random"}, {"seed", 3}});
  EXPECT_EQ(random["channels"].get<std::vector<std::size_t>>(), plan_random_pruning(5, 3).channels());
  post("/api/prune/plan", {{"budget", 0}}, 400);
  post("/api/prune/plan", {{"budget", 4}, {"strategy", "magic"}}, 400);
  post("/api/prune/plan", json::object(), 400);
}

TEST_F(ServiceTest, PruneUndoAndResetTrackVersions) {
  auto j = post("/api/prune", {{"channels", {1, 2}}, {"expected_version", 0}});
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["pruned_channels"], json({1, 2}));
  j = post("/api/prune", {{"channels", {7}}});
  EXPECT_EQ(j["pruned_channels"], json({1, 2, 7}));
  j = post("/api/prune/undo", json::object());
  EXPECT_EQ(j["version"], 3);
  EXPECT_EQ(j["pruned_channels"], json({1, 2}));
  j = post("/api/reset", json::object());
  EXPECT_EQ(j["version"], 4);
  EXPECT_TRUE(j["pruned_channels"].empty());
  post("/api/prune/undo", json::object(), 400);
}

TEST_F(ServiceTest, StaleExpectedVersionIsAConflict) {
  post("/api/prune", {{"channels", {3}}, {"expected_version", 0}});
  const auto j = post("/api/prune", {{"channels", {4}}, {"expected_version", 0}}, 409);
  EXPECT_EQ(j["kind"], "conflict");
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(session_->current()->pruned_channels(), (std::vector<std::size_t>{3}));
}

TEST_F(ServiceTest, PruneValidation) {
  post("/api/prune", {{"channels", {200}}}, 400);
  post("/api/prune", {{"channels", json::array()}}, 400);
  post("/api/prune", {{"channels", "all"}}, 400);
  auto res = client_->Post("/api/prune", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  std::vector<int> all(128);
  std::iota(all.begin(), all.end(), 0);
  post("/api/prune", {{"channels", all}}, 400);
  EXPECT_EQ(session_->current()->version, 0u);
}

TEST_F(ServiceTest, TransformChangesCurrentButNotBaselineInference) {
  const auto before = post("/api/infer", {{"samples", {0, 1}}});
  EXPECT_EQ(before["results"][0]["baseline"], before["results"][0]["current"]);
  post("/api/transform", {{"n", 3.0}, {"beta", 0.5}});
  const auto after = post("/api/infer", {{"samples", {0, 1}}});
  EXPECT_EQ(after["results"][0]["baseline"], before["results"][0]["baseline"]);
  EXPECT_NE(after["results"][0]["current"], before["results"][0]["current"]);
  EXPECT_EQ(after["transform"]["n"], 3.0);
  post("/api/transform", {{"n", 0.5}, {"beta", 0.0}}, 400);
  post("/api/transform", {{"n", 2.0}}, 400);
}

TEST_F(ServiceTest, TransformCurveSamplesG) {
  const auto j = get("/api/transform/curve?n=2&beta=0&points=5");
  EXPECT_EQ(j["m"], json({0.0, 0.25, 0.5, 0.75, 1.0}));
  const auto g = j["g"].get<std::vector<double>>();
  EXPECT_NEAR(g[1], 0.125, 1e-7);
  EXPECT_NEAR(g[2], 0.5, 1e-7);
  get("/api/transform/curve?points=1", 400);
  get("/api/transform/curve?n=0.2", 400);
}

TEST_F(ServiceTest, InferOnUploadedImageMatchesSample) {
  const auto& rec = session_->dataset()[5];
  json image{{"height", 8}, {"width", 8}, {"data", std::vector<float>(rec.image.data().begin(), rec.image.data().end())}};
  const auto up = post("/api/infer", {{"image", image}});
  const auto by_id = post("/api/infer", {{"samples", {5}}});
  EXPECT_EQ(up["results"][0]["current"], by_id["results"][0]["current"]);
  EXPECT_TRUE(up["results"][0]["sample"].is_null());
  EXPECT_EQ(by_id["results"][0]["labels"].size(), 8u);
  image["width"] = 9;
  post("/api/infer", {{"image", image}}, 400);
  post("/api/infer", json::object(), 400);
  post("/api/infer", {{"samples", {100000}}}, 404);
}

TEST_F(ServiceTest, AccuracyReportsBaselineAndCurrent) {
  auto j = get("/api/accuracy");
  EXPECT_EQ(j["samples"], 12);
  EXPECT_EQ(j["baseline"], j["current"]);
  const auto clean = evaluate_accuracy(session_->current()->model, session_->accuracy_records());
  EXPECT_EQ(j["baseline"]["mean"].get<double>(), clean.mean);
  post("/api/prune", {{"channels", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 11, 12}}});
  j = get("/api/accuracy?noise_sigma=0.2&seed=3");
  EXPECT_EQ(j["noise_sigma"], 0.2);
  EXPECT_EQ(j["seed"], 3);
  get("/api/accuracy?noise_sigma=-1", 400);
  get("/api/accuracy?noise_sigma=abc", 400);
}

TEST_F(ServiceTest, SensitivityMapHasImageShape) {
  const auto j = get("/api/sensitivity?sample=2&k=1");
  EXPECT_EQ(j["shape"], json({8, 8}));
  get("/api/sensitivity?sample=2&k=8", 404);
  get("/api/sensitivity?sample=2", 400);
}

TEST_F(ServiceTest, UnknownRouteIsJson404AndCorsHeadersArePresent) {
  auto res = client_->Get("/api/nothing");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["kind"], "not_found");
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServiceTest, ConcurrentPrunesWithTheSameExpectedVersionHaveOneWinner) {
  constexpr int writers = 6;
  std::atomic<int> ok{0}, conflicts{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < writers; ++i) {
    threads.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port_);
      auto res = c.Post("/api/prune", json{{"channels", {20 + i}}, {"expected_version", 0}}.dump(), "application/json");
      if (res && res->status == 200) ++ok;
      if (res && res->status == 409) ++conflicts;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), 1);
  EXPECT_EQ(conflicts.load(), writers - 1);
  EXPECT_EQ(session_->current()->version, 1u);
}

TEST_F(ServiceTest, ReadersSeeConsistentSnapshotsDuringWrites) {
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::thread reader([&] {
    httplib::Client c("127.0.0.1", port_);
    while (!stop) {
      auto res = c.Get("/api/model/summary");
      if (!res || res->status != 200) {
        ++bad;
        continue;
      }
      const auto j = json::parse(res->body);
      // Each write prunes exactly one more channel, so the count equals the version.
      if (j["pruned_channels"].size() != j["version"].get<std::size_t>()) ++bad;
    }
  });
  for (int i = 0; i < 20; ++i) post("/api/prune", {{"channels", {30 + i}}});
  stop = true;
  reader.join();
  EXPECT_EQ(bad.load(), 0);
}

TEST(ServiceBind, FlagBeatsEnvironmentBeatsDefault) {
  ::unsetenv("PREDNET_BIND");
  auto b = service::resolve_bind(std::nullopt);
  EXPECT_EQ(b.host, "127.0.0.1");
  EXPECT_EQ(b.port, 8080);
  ::setenv("PREDNET_BIND", "0.0.0.0:9001", 1);
  b = service::resolve_bind(std::nullopt);
  EXPECT_EQ(b.host, "0.0.0.0");
  EXPECT_EQ(b.port, 9001);
  b = service::resolve_bind(std::string("localhost:7000"));
  EXPECT_EQ(b.host, "localhost");
  EXPECT_EQ(b.port, 7000);
  ::unsetenv("PREDNET_BIND");
  EXPECT_EQ(service::parse_bind(":81").port, 81);
  EXPECT_THROW(service::parse_bind("host:99999"), argument_error);
  EXPECT_THROW(service::parse_bind("host:"), argument_error);
}

TEST(ServiceSession, RejectsMismatchedDataset) {
  EXPECT_THROW(service::session(prednet::testing::random_net(3), prednet::testing::tiny_dataset()), dimension_error);
}
