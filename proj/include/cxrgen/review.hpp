#pragma once

// Blind review sessions. Each session is an append-only JSONL log in the
// data directory:
//
//   {"event":"session", "session":{...items with origin...}}
//   {"event":"score", "item_id":..., "rater_id":..., "score":4, "timestamp":...}
//
// The in-memory index is rebuilt from the logs on startup; a later score
// line for the same (item, rater) replaces the earlier one.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "cxrgen/dataset.hpp"
#include "cxrgen/random.hpp"

namespace cxrgen {

enum class Origin { human, model };

inline const char* origin_name(Origin o) { return o == Origin::human ? "human" : "model"; }

inline Origin parse_origin(const std::string& s) {
  if (s == "human") return Origin::human;
  if (s == "model") return Origin::model;
  throw std::invalid_argument("unknown origin '" + s + "'");
}

constexpr int kMinScore = 1;
constexpr int kMaxScore = 5;
constexpr int kAcceptableScore = 4;

struct RubricLevel {
  int score;
  std::string text;
};

inline const std::vector<RubricLevel>& rubric() {
  static const std::vector<RubricLevel> levels{
      {5, "Complete and correct: every abnormality is reported and described correctly."},
      {4, "Acceptable: all significant abnormalities are reported; only small errors of detail or wording."},
      {3, "Partly correct: a significant abnormality is missed or misdescribed, but most of the report holds."},
      {2, "Mostly wrong: the main abnormalities are missed or described incorrectly."},
      {1, "Unusable: the report does not correspond to the image."},
  };
  return levels;
}

// Raised for conditions a client can fix; `code` is machine-readable.
struct ReviewError : std::runtime_error {
  std::string code;
  ReviewError(std::string c, const std::string& message) : std::runtime_error(message), code(std::move(c)) {}
};

struct ReviewItem {
  std::string item_id;
  std::string session_id;
  std::string source_id;  // dataset sample id
  std::filesystem::path image;
  std::string report;
  Origin origin = Origin::human;
};

struct ScoreRecord {
  std::string item_id;
  std::string rater_id;
  int score = 0;
  std::string timestamp;
};

struct ReviewSession {
  std::string id;
  std::uint64_t seed = 0;
  std::size_t n_model = 0;
  std::size_t n_human = 0;
  std::string created;
  std::vector<ReviewItem> items;
};

// A candidate image with its reference report.
struct SessionSource {
  std::string id;
  std::filesystem::path image;
  std::string report;
};

using ReportGenerator = std::function<std::string(const SessionSource&)>;

inline std::vector<SessionSource> test_sources(const Dataset& ds) {
  std::vector<SessionSource> out;
  for (const auto* r : ds.split(Split::test)) out.push_back({r->id, ds.root / r->image_file, r->report});
  return out;
}

// Draws n_model + n_human distinct sources with the seed; the first n_model
// get generated reports, the rest keep their reference. The combined list is
// shuffled with a second stream of the same seed.
inline ReviewSession assemble_session(const std::string& id, const std::vector<SessionSource>& sources,
                                      std::size_t n_model, std::size_t n_human, const ReportGenerator& generate,
                                      std::uint64_t seed) {
  if (n_model + n_human == 0) throw ReviewError("validation", "a session needs at least one item");
  if (n_model + n_human > sources.size()) {
    throw ReviewError("validation", "requested " + std::to_string(n_model + n_human) + " items but only " +
                                        std::to_string(sources.size()) + " test images are available");
  }
  std::set<std::string> unique_ids;
  for (const auto& s : sources) unique_ids.insert(s.id);
  if (unique_ids.size() != sources.size()) throw ReviewError("validation", "source ids are not unique");
  if (n_model > 0 && !generate) throw ReviewError("unavailable", "no report generator is configured");

  std::vector<std::size_t> order(sources.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng draw(derive_seed(seed, 1));
  draw.shuffle(order);

  ReviewSession s;
  s.id = id;
  s.seed = seed;
  s.n_model = n_model;
  s.n_human = n_human;
  for (std::size_t k = 0; k < n_model + n_human; ++k) {
    const auto& src = sources[order[k]];
    ReviewItem item;
    item.session_id = id;
    item.source_id = src.id;
    item.image = src.image;
    item.origin = k < n_model ? Origin::model : Origin::human;
    item.report = item.origin == Origin::model ? generate(src) : src.report;
    s.items.push_back(std::move(item));
  }
  Rng mix(derive_seed(seed, 2));
  mix.shuffle(s.items);
  for (std::size_t i = 0; i < s.items.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "-%04zu", i + 1);
    s.items[i].item_id = id + buf;
  }
  return s;
}

// What a rater sees. Origin and source id stay on the server.
inline nlohmann::json rater_payload(const ReviewItem& item) {
  return {{"item_id", item.item_id},
          {"session_id", item.session_id},
          {"report", item.report},
          {"image_url", "/items/" + item.item_id + "/image"}};
}

struct Histogram {
  std::array<std::size_t, kMaxScore> counts{};  // counts[s - 1]

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::size_t acceptable() const {
    std::size_t n = 0;
    for (int s = kAcceptableScore; s <= kMaxScore; ++s) n += counts[static_cast<std::size_t>(s - 1)];
    return n;
  }
  // Percent of records, 0 when empty.
  double percent(int score) const {
    const auto t = total();
    return t ? 100.0 * static_cast<double>(counts[static_cast<std::size_t>(score - 1)]) / static_cast<double>(t) : 0.0;
  }
  double acceptable_percent() const {
    const auto t = total();
    return t ? 100.0 * static_cast<double>(acceptable()) / static_cast<double>(t) : 0.0;
  }
  void add(int score) { ++counts[static_cast<std::size_t>(score - 1)]; }
};

struct Distribution {
  std::string session_id;
  std::size_t items = 0;
  std::size_t pending = 0;  // items nobody has scored
  std::map<Origin, Histogram> by_origin{{Origin::human, {}}, {Origin::model, {}}};
  std::map<std::string, std::map<Origin, Histogram>> by_rater;
  std::map<Origin, Histogram> pooled_items;  // per item, mean score over raters rounded half up
};

inline nlohmann::json histogram_json(const Histogram& h) {
  nlohmann::json counts = nlohmann::json::object(), pct = nlohmann::json::object();
  for (int s = kMinScore; s <= kMaxScore; ++s) {
    counts[std::to_string(s)] = h.counts[static_cast<std::size_t>(s - 1)];
    pct[std::to_string(s)] = h.percent(s);
  }
  return {{"counts", counts},
          {"percent", pct},
          {"total", h.total()},
          {"acceptable", h.acceptable()},
          {"acceptable_percent", h.acceptable_percent()}};
}

inline nlohmann::json distribution_json(const Distribution& d) {
  nlohmann::json j{{"session_id", d.session_id}, {"items", d.items}, {"pending", d.pending},
                   {"acceptable_min", kAcceptableScore}};
  for (const auto& [o, h] : d.by_origin) j["by_origin"][origin_name(o)] = histogram_json(h);
  for (const auto& [o, h] : d.pooled_items) j["pooled_items"][origin_name(o)] = histogram_json(h);
  j["by_rater"] = nlohmann::json::object();
  for (const auto& [rater, m] : d.by_rater)
    for (const auto& [o, h] : m) j["by_rater"][rater][origin_name(o)] = histogram_json(h);
  return j;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class ReviewStore {
 public:
  using Clock = std::function<std::string()>;

  explicit ReviewStore(std::filesystem::path dir, Clock clock = utc_now) : dir_(std::move(dir)), clock_(std::move(clock)) {
    std::filesystem::create_directories(dir_);
    std::vector<std::filesystem::path> logs;
    for (const auto& e : std::filesystem::directory_iterator(dir_))
      if (e.path().extension() == ".jsonl") logs.push_back(e.path());
    std::sort(logs.begin(), logs.end());
    for (const auto& p : logs) replay(p);
  }

  const std::filesystem::path& directory() const { return dir_; }

  ReviewSession create_session(const std::vector<SessionSource>& sources, std::size_t n_model, std::size_t n_human,
                               const ReportGenerator& generate, std::uint64_t seed) {
    std::string id;
    {
      std::shared_lock lock(mu_);
      id = next_session_id();
    }
    // Report generation can be slow, so it runs outside the lock.
    auto s = assemble_session(id, sources, n_model, n_human, generate, seed);
    std::unique_lock lock(mu_);
    if (sessions_.count(s.id)) {  // another creation won the id; renumber
      const auto fresh = next_session_id();
      for (auto& item : s.items) item.item_id = fresh + item.item_id.substr(s.id.size());
      for (auto& item : s.items) item.session_id = fresh;
      s.id = fresh;
    }
    s.created = clock_();
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : s.items) {
      items.push_back({{"item_id", it.item_id}, {"source_id", it.source_id}, {"image", it.image.string()},
                       {"report", it.report}, {"origin", origin_name(it.origin)}});
    }
    append(log_path(s.id), {{"event", "session"},
                            {"session",
                             {{"id", s.id}, {"seed", s.seed}, {"n_model", s.n_model}, {"n_human", s.n_human},
                              {"created", s.created}, {"items", items}}}});
    index(s);
    return s;
  }

  std::vector<std::string> session_ids() const {
    std::shared_lock lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, s] : sessions_) out.push_back(id);
    return out;
  }

  ReviewSession session(const std::string& id) const {
    std::shared_lock lock(mu_);
    return find_session(id);
  }

  ReviewItem item(const std::string& item_id) const {
    std::shared_lock lock(mu_);
    return find_item(item_id);
  }

  // Durable before it returns; resubmission by the same rater replaces the
  // earlier score.
  ScoreRecord submit_score(const std::string& item_id, const std::string& rater_id, int score) {
    if (score < kMinScore || score > kMaxScore) {
      throw ReviewError("validation", "score must be between 1 and 5, got " + std::to_string(score));
    }
    if (rater_id.empty()) throw ReviewError("validation", "rater_id must not be empty");
    std::unique_lock lock(mu_);
    const auto& it = find_item(item_id);
    ScoreRecord r{item_id, rater_id, score, clock_()};
    append(log_path(it.session_id),
           {{"event", "score"}, {"item_id", r.item_id}, {"rater_id", r.rater_id}, {"score", r.score}, {"timestamp", r.timestamp}});
    scores_[it.session_id][{item_id, rater_id}] = r;
    return r;
  }

  std::vector<ScoreRecord> scores(const std::string& session_id) const {
    std::shared_lock lock(mu_);
    find_session(session_id);
    std::vector<ScoreRecord> out;
    if (auto it = scores_.find(session_id); it != scores_.end())
      for (const auto& [key, r] : it->second) out.push_back(r);
    return out;
  }

  Distribution distribution(const std::string& session_id) const {
    std::shared_lock lock(mu_);
    const auto& s = find_session(session_id);
    Distribution d;
    d.session_id = session_id;
    d.items = s.items.size();
    d.pooled_items = {{Origin::human, {}}, {Origin::model, {}}};
    std::map<std::string, std::vector<int>> per_item;
    if (auto it = scores_.find(session_id); it != scores_.end()) {
      for (const auto& [key, r] : it->second) {
        const Origin o = find_item(r.item_id).origin;
        d.by_origin[o].add(r.score);
        d.by_rater[r.rater_id][o].add(r.score);
        per_item[r.item_id].push_back(r.score);
      }
    }
    for (auto& [rater, m] : d.by_rater) {
      m.try_emplace(Origin::human);
      m.try_emplace(Origin::model);
    }
    for (const auto& item : s.items) {
      auto it = per_item.find(item.item_id);
      if (it == per_item.end()) {
        ++d.pending;
        continue;
      }
      int sum = 0;
      for (int v : it->second) sum += v;
      const int n = static_cast<int>(it->second.size());
      d.pooled_items[item.origin].add((2 * sum + n) / (2 * n));
    }
    return d;
  }

 private:
  std::filesystem::path log_path(const std::string& session_id) const { return dir_ / (session_id + ".jsonl"); }

  std::string next_session_id() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "session-%04zu", sessions_.size() + 1);
    return buf;
  }

  static void append(const std::filesystem::path& path, const nlohmann::json& event) {
    const std::string line = event.dump() + "\n";
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() && std::fflush(f) == 0 &&
                    ::fsync(fileno(f)) == 0;
    std::fclose(f);
    if (!ok) throw std::runtime_error("failed writing " + path.string());
  }

  // A crash mid-append can leave a partial last line; cut it so the next
  // append starts on a fresh line.
  static void drop_torn_tail(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (text.empty() || text.back() == '\n') return;
    const auto cut = text.find_last_of('\n');
    const std::size_t keep = cut == std::string::npos ? 0 : cut + 1;
    in.close();
    std::filesystem::resize_file(path, keep);
  }

  void replay(const std::filesystem::path& path) {
    drop_torn_tail(path);
    const auto lines = read_jsonl_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      nlohmann::json e;
      try {
        e = nlohmann::json::parse(lines[i]);
      } catch (const nlohmann::json::exception&) {
        throw std::runtime_error(path.string() + ":" + std::to_string(i + 1) + ": malformed event");
      }
      const auto type = e.at("event").get<std::string>();
      if (type == "session") {
        const auto& j = e.at("session");
        ReviewSession s;
        s.id = j.at("id").get<std::string>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.n_model = j.at("n_model").get<std::size_t>();
        s.n_human = j.at("n_human").get<std::size_t>();
        s.created = j.at("created").get<std::string>();
        for (const auto& it : j.at("items")) {
          s.items.push_back({it.at("item_id").get<std::string>(), s.id, it.at("source_id").get<std::string>(),
                             it.at("image").get<std::string>(), it.at("report").get<std::string>(),
                             parse_origin(it.at("origin").get<std::string>())});
        }
        index(s);
      } else if (type == "score") {
        const auto item_id = e.at("item_id").get<std::string>();
        const auto& it = find_item(item_id);
        ScoreRecord r{item_id, e.at("rater_id").get<std::string>(), e.at("score").get<int>(),
                      e.value("timestamp", std::string())};
        scores_[it.session_id][{item_id, r.rater_id}] = r;
      } else {
        throw std::runtime_error(path.string() + ": unknown event '" + type + "'");
      }
    }
  }

  void index(const ReviewSession& s) {
    for (std::size_t i = 0; i < s.items.size(); ++i) items_[s.items[i].item_id] = {s.id, i};
    sessions_[s.id] = s;
  }

  const ReviewSession& find_session(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ReviewError("not_found", "no session '" + id + "'");
    return it->second;
  }

  const ReviewItem& find_item(const std::string& item_id) const {
    auto it = items_.find(item_id);
    if (it == items_.end()) throw ReviewError("not_found", "no item '" + item_id + "'");
    return sessions_.at(it->second.first).items[it->second.second];
  }

  std::filesystem::path dir_;
  Clock clock_;
  mutable std::shared_mutex mu_;
  std::map<std::string, ReviewSession> sessions_;
  std::map<std::string, std::pair<std::string, std::size_t>> items_;
  std::map<std::string, std::map<std::pair<std::string, std::string>, ScoreRecord>> scores_;
};

}  // namespace cxrgen
