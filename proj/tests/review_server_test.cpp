#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cxrgen/review_server.hpp"

namespace cxrgen {
namespace {

using nlohmann::json;

class ReviewServerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / "cxrgen_review_server";
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_ / "images");
    std::vector<SessionSource> src;
    for (int i = 0; i < 12; ++i) {
      const auto img = dir_ / "images" / ("s" + std::to_string(i) + ".png");
      std::ofstream(img, std::ios::binary) << "PNGDATA" << i;
      src.push_back({"s" + std::to_string(i), img, "reference " + std::to_string(i)});
    }
    start(make_session_factory(src, [](const SessionSource& s) { return "generated " + s.id; }));
  }

  void start(SessionFactory factory) {
    store_ = std::make_unique<ReviewStore>(dir_ / "store");
    server_ = std::make_unique<ReviewServer>(*store_, std::move(factory));
    port_ = server_->bind("127.0.0.1", 0);
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_->listen(); });
    server_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }

  void TearDown() override {
    server_->stop();
    thread_.join();
  }

  std::pair<int, json> post(const std::string& path, const std::string& body) {
    auto r = client_->Post(path, body, "application/json");
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }

  std::pair<int, json> get(const std::string& path) {
    auto r = client_->Get(path);
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }

  std::string new_session(int n_model, int n_human) {
    auto [status, j] = post("/sessions", json{{"n_model", n_model}, {"n_human", n_human}, {"seed", 3}}.dump());
    EXPECT_EQ(status, 201) << j.dump();
    return j["session_id"];
  }

  std::filesystem::path dir_;
  std::unique_ptr<ReviewStore> store_;
  std::unique_ptr<ReviewServer> server_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(ReviewServerTest, FullRaterFlow) {
  const auto sid = new_session(3, 3);
  auto [status, items] = get("/sessions/" + sid + "/items");
  ASSERT_EQ(status, 200);
  ASSERT_EQ(items["items"].size(), 6u);
  for (const auto& it : items["items"]) EXPECT_FALSE(it.contains("origin"));

  const std::string first = items["items"][0]["item_id"];
  auto img = client_->Get(items["items"][0]["image_url"].get<std::string>());
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(img->body.substr(0, 7), "PNGDATA");

  auto [s1, rec] = post("/items/" + first + "/scores", R"({"rater_id":"dr-a","score":4})");
  EXPECT_EQ(s1, 200);
  EXPECT_EQ(rec["score"], 4);
  post("/items/" + first + "/scores", R"({"rater_id":"dr-a","score":5})");

  auto [s2, mine] = get("/sessions/" + sid + "/items?rater_id=dr-a");
  EXPECT_EQ(s2, 200);
  EXPECT_EQ(mine["items"][0]["score"], 5);
  EXPECT_TRUE(mine["items"][1]["score"].is_null());

  auto [s3, dist] = get("/sessions/" + sid + "/distribution");
  EXPECT_EQ(s3, 200);
  EXPECT_EQ(dist["pending"], 5);
  const std::string origin = store_->item(first).origin == Origin::model ? "model" : "human";
  EXPECT_EQ(dist["by_origin"][origin]["counts"]["5"], 1);
  EXPECT_EQ(dist["by_rater"]["dr-a"][origin]["total"], 1);

  auto [s4, list] = get("/sessions");
  EXPECT_EQ(s4, 200);
  EXPECT_EQ(list["sessions"][0]["session_id"], sid);
}

TEST_F(ReviewServerTest, ValidationErrors) {
  const auto sid = new_session(1, 1);
  const std::string item = store_->session(sid).items[0].item_id;
  for (const char* body : {R"({"rater_id":"a","score":0})", R"({"rater_id":"a","score":6})",
                           R"({"rater_id":"a","score":4.5})", R"({"rater_id":"a","score":"4"})",
                           R"({"rater_id":"a","score":4294967300})", R"({"score":3})", R"({"rater_id":"","score":3})",
                           "not json", "[1,2]"}) {
    auto [status, j] = post("/items/" + item + "/scores", body);
    EXPECT_EQ(status, 400) << body;
    EXPECT_EQ(j["code"], "validation") << body;
    EXPECT_TRUE(j["message"].is_string());
  }
  for (const char* body : {R"({"n_model":-1,"n_human":1})", R"({"n_human":1})", R"({"n_model":10,"n_human":10})",
                           R"({"n_model":0,"n_human":0})"}) {
    auto [status, j] = post("/sessions", body);
    EXPECT_EQ(status, 400) << body;
  }
  EXPECT_TRUE(store_->scores(sid).empty());
}

TEST_F(ReviewServerTest, UnknownIdsAre404) {
  EXPECT_EQ(get("/sessions/nope/items").first, 404);
  EXPECT_EQ(get("/sessions/nope/distribution").first, 404);
  EXPECT_EQ(get("/items/nope/image").first, 404);
  auto [status, j] = post("/items/nope/scores", R"({"rater_id":"a","score":3})");
  EXPECT_EQ(status, 404);
  EXPECT_EQ(j["code"], "not_found");
}

TEST_F(ReviewServerTest, MissingImageFileIs404) {
  const auto sid = new_session(1, 1);
  const auto item = store_->session(sid).items[0];
  std::filesystem::remove(item.image);
  EXPECT_EQ(get("/items/" + item.item_id + "/image").first, 404);
}

TEST_F(ReviewServerTest, RubricAndCors) {
  auto r = client_->Get("/rubric");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["levels"].size(), 5u);
  EXPECT_EQ(j["acceptable_min"], 4);
  auto pre = client_->Options("/items/x/scores");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
}

TEST_F(ReviewServerTest, WithoutFactorySessionCreationIsUnavailable) {
  server_->stop();
  thread_.join();
  start(nullptr);
  auto [status, j] = post("/sessions", R"({"n_model":1,"n_human":1})");
  EXPECT_EQ(status, 503);
  EXPECT_EQ(j["code"], "unavailable");
}

}  // namespace
}  // namespace cxrgen
