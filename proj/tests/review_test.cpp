#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "cxrgen/review.hpp"

namespace cxrgen {
namespace {

std::vector<SessionSource> sources(std::size_t n) {
  std::vector<SessionSource> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"s" + std::to_string(i), "/img/s" + std::to_string(i) + ".png", "reference " + std::to_string(i)});
  }
  return out;
}

std::string generated(const SessionSource& s) { return "generated for " + s.id; }

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cxrgen_review_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

TEST(AssembleSessionTest, CountsOriginsAndDisjointSources) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = assemble_session("session-0001", sources(50), 12, 9, generated, seed);
    ASSERT_EQ(s.items.size(), 21u);
    std::size_t model = 0;
    std::set<std::string> src, ids;
    for (const auto& it : s.items) {
      model += it.origin == Origin::model;
      src.insert(it.source_id);
      ids.insert(it.item_id);
      if (it.origin == Origin::model) {
        EXPECT_EQ(it.report, "generated for " + it.source_id);
      } else {
        EXPECT_EQ(it.report, "reference " + it.source_id.substr(1));
      }
      EXPECT_EQ(it.session_id, "session-0001");
    }
    EXPECT_EQ(model, 12u);
    EXPECT_EQ(src.size(), 21u);
    EXPECT_EQ(ids.size(), 21u);
  }
}

TEST(AssembleSessionTest, DeterministicInSeed) {
  const auto a = assemble_session("x", sources(30), 5, 5, generated, 8);
  const auto b = assemble_session("x", sources(30), 5, 5, generated, 8);
  const auto c = assemble_session("x", sources(30), 5, 5, generated, 9);
  bool differs = false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_EQ(a.items[i].source_id, b.items[i].source_id);
    EXPECT_EQ(a.items[i].origin, b.items[i].origin);
    differs |= a.items[i].source_id != c.items[i].source_id;
  }
  EXPECT_TRUE(differs);
}

TEST(AssembleSessionTest, OriginsAreInterleaved) {
  const auto s = assemble_session("x", sources(200), 100, 100, generated, 1);
  std::size_t model_in_first_half = 0;
  for (std::size_t i = 0; i < 100; ++i) model_in_first_half += s.items[i].origin == Origin::model;
  EXPECT_GT(model_in_first_half, 30u);
  EXPECT_LT(model_in_first_half, 70u);
}

TEST(AssembleSessionTest, RejectsBadRequests) {
  EXPECT_THROW(assemble_session("x", sources(5), 3, 3, generated, 1), ReviewError);
  EXPECT_THROW(assemble_session("x", sources(5), 0, 0, generated, 1), ReviewError);
  EXPECT_THROW(assemble_session("x", sources(5), 1, 0, nullptr, 1), ReviewError);
  EXPECT_NO_THROW(assemble_session("x", sources(5), 0, 5, nullptr, 1));
  auto dup = sources(4);
  dup[3].id = dup[0].id;
  EXPECT_THROW(assemble_session("x", dup, 1, 1, generated, 1), ReviewError);
}

TEST(RaterPayloadTest, HidesOrigin) {
  const auto s = assemble_session("x", sources(10), 2, 2, generated, 3);
  for (const auto& it : s.items) {
    const auto j = rater_payload(it);
    const auto text = j.dump();
    EXPECT_EQ(text.find("origin"), std::string::npos);
    EXPECT_EQ(text.find("human"), std::string::npos);
    EXPECT_EQ(text.find("model"), std::string::npos);
    std::set<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.insert(k);
    EXPECT_EQ(keys, (std::set<std::string>{"item_id", "session_id", "report", "image_url"}));
    EXPECT_EQ(j["image_url"], "/items/" + it.item_id + "/image");
  }
}

TEST(RubricTest, FiveLevelsDescending) {
  const auto& r = rubric();
  ASSERT_EQ(r.size(), 5u);
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(r[i].score, 5 - static_cast<int>(i));
    EXPECT_FALSE(r[i].text.empty());
  }
}

TEST(ReviewStoreTest, ScoresUpsertPerRater) {
  ReviewStore store(scratch("upsert"), fixed_clock);
  const auto s = store.create_session(sources(10), 2, 2, generated, 1);
  const auto& id = s.items[0].item_id;
  store.submit_score(id, "r1", 2);
  store.submit_score(id, "r1", 5);
  store.submit_score(id, "r2", 3);
  const auto all = store.scores(s.id);
  ASSERT_EQ(all.size(), 2u);
  for (const auto& r : all) EXPECT_EQ(r.score, r.rater_id == "r1" ? 5 : 3);
  EXPECT_EQ(all[0].timestamp, "2026-01-01T00:00:00Z");
}

TEST(ReviewStoreTest, ValidationAndLookupErrors) {
  ReviewStore store(scratch("errors"), fixed_clock);
  const auto s = store.create_session(sources(10), 1, 1, generated, 1);
  for (int bad : {0, 6, -1}) {
    try {
      store.submit_score(s.items[0].item_id, "r", bad);
      FAIL() << bad;
    } catch (const ReviewError& e) {
      EXPECT_EQ(e.code, "validation");
    }
  }
  EXPECT_THROW(store.submit_score(s.items[0].item_id, "", 3), ReviewError);
  try {
    store.submit_score("nope", "r", 3);
    FAIL();
  } catch (const ReviewError& e) {
    EXPECT_EQ(e.code, "not_found");
  }
  EXPECT_THROW(store.session("nope"), ReviewError);
  EXPECT_THROW(store.distribution("nope"), ReviewError);
}

TEST(ReviewStoreTest, StateSurvivesRestart) {
  const auto dir = scratch("restart");
  ReviewSession s;
  {
    ReviewStore store(dir, fixed_clock);
    s = store.create_session(sources(20), 3, 3, generated, 5);
    store.create_session(sources(20), 1, 0, generated, 6);
    store.submit_score(s.items[0].item_id, "r1", 4);
    store.submit_score(s.items[0].item_id, "r1", 1);
    store.submit_score(s.items[1].item_id, "r2", 5);
  }
  ReviewStore again(dir, fixed_clock);
  EXPECT_EQ(again.session_ids(), (std::vector<std::string>{"session-0001", "session-0002"}));
  const auto t = again.session(s.id);
  ASSERT_EQ(t.items.size(), s.items.size());
  for (std::size_t i = 0; i < t.items.size(); ++i) {
    EXPECT_EQ(t.items[i].item_id, s.items[i].item_id);
    EXPECT_EQ(t.items[i].origin, s.items[i].origin);
    EXPECT_EQ(t.items[i].report, s.items[i].report);
    EXPECT_EQ(t.items[i].image, s.items[i].image);
  }
  const auto scores = again.scores(s.id);
  ASSERT_EQ(scores.size(), 2u);
  for (const auto& r : scores) EXPECT_EQ(r.score, r.rater_id == "r1" ? 1 : 5);
  const auto next = again.create_session(sources(20), 0, 1, nullptr, 7);
  EXPECT_EQ(next.id, "session-0003");
}

TEST(ReviewStoreTest, TornFinalLineIgnored) {
  const auto dir = scratch("torn");
  std::string sid, item;
  {
    ReviewStore store(dir, fixed_clock);
    const auto s = store.create_session(sources(4), 1, 1, generated, 1);
    sid = s.id;
    item = s.items[0].item_id;
    store.submit_score(item, "r", 4);
  }
  std::ofstream(dir / (sid + ".jsonl"), std::ios::app) << R"({"event":"score","item_id":")";
  {
    ReviewStore again(dir, fixed_clock);
    EXPECT_EQ(again.scores(sid).size(), 1u);
    again.submit_score(item, "q", 2);
  }
  ReviewStore third(dir, fixed_clock);
  EXPECT_EQ(third.scores(sid).size(), 2u);
}

TEST(ReviewStoreTest, DistributionCountsByOriginRaterAndItem) {
  ReviewStore store(scratch("dist"), fixed_clock);
  const auto s = store.create_session(sources(10), 3, 3, generated, 2);
  std::vector<const ReviewItem*> model, human;
  for (const auto& it : s.items) (it.origin == Origin::model ? model : human).push_back(&it);
  store.submit_score(model[0]->item_id, "a", 5);
  store.submit_score(model[0]->item_id, "b", 4);
  store.submit_score(model[1]->item_id, "a", 2);
  store.submit_score(human[0]->item_id, "a", 4);
  store.submit_score(human[0]->item_id, "b", 3);

  const auto d = store.distribution(s.id);
  EXPECT_EQ(d.items, 6u);
  EXPECT_EQ(d.pending, 3u);
  const auto& m = d.by_origin.at(Origin::model);
  EXPECT_EQ(m.total(), 3u);
  EXPECT_EQ(m.counts[4], 1u);
  EXPECT_EQ(m.counts[3], 1u);
  EXPECT_EQ(m.counts[1], 1u);
  EXPECT_EQ(m.acceptable(), 2u);
  EXPECT_NEAR(m.acceptable_percent(), 200.0 / 3.0, 1e-12);
  EXPECT_EQ(d.by_origin.at(Origin::human).total(), 2u);
  EXPECT_EQ(d.by_rater.at("b").at(Origin::model).counts[3], 1u);
  EXPECT_EQ(d.by_rater.at("b").at(Origin::human).counts[2], 1u);
  // Item means 4.5 -> 5, 2 -> 2 and 3.5 -> 4.
  EXPECT_EQ(d.pooled_items.at(Origin::model).counts[4], 1u);
  EXPECT_EQ(d.pooled_items.at(Origin::model).counts[1], 1u);
  EXPECT_EQ(d.pooled_items.at(Origin::human).counts[3], 1u);

  const auto j = distribution_json(d);
  EXPECT_EQ(j["by_origin"]["model"]["counts"]["5"], 1);
  EXPECT_EQ(j["pending"], 3);
  double pct = 0;
  for (int k = 1; k <= 5; ++k) pct += j["by_origin"]["model"]["percent"][std::to_string(k)].get<double>();
  EXPECT_NEAR(pct, 100.0, 1e-9);
}

TEST(ReviewStoreTest, EmptyDistributionIsZeroNotNan) {
  ReviewStore store(scratch("empty"), fixed_clock);
  const auto s = store.create_session(sources(4), 1, 1, generated, 2);
  const auto d = store.distribution(s.id);
  EXPECT_EQ(d.pending, 2u);
  EXPECT_EQ(d.by_origin.at(Origin::model).acceptable_percent(), 0.0);
  EXPECT_EQ(d.by_origin.at(Origin::model).percent(3), 0.0);
}

TEST(ReviewStoreTest, ConcurrentSubmissionsAllPersist) {
  const auto dir = scratch("concurrent");
  std::string sid;
  {
    ReviewStore store(dir, fixed_clock);
    const auto s = store.create_session(sources(40), 20, 20, generated, 3);
    sid = s.id;
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
      threads.emplace_back([&, t] {
        for (const auto& it : s.items) store.submit_score(it.item_id, "r" + std::to_string(t), 1 + t);
      });
    }
    for (auto& th : threads) th.join();
    EXPECT_EQ(store.scores(sid).size(), 160u);
  }
  ReviewStore again(dir, fixed_clock);
  EXPECT_EQ(again.scores(sid).size(), 160u);
  EXPECT_EQ(again.distribution(sid).pending, 0u);
}

}  // namespace
}  // namespace cxrgen
