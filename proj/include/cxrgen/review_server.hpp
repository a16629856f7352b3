#pragma once

// REST front end for the review store.
//
//   POST /sessions                  {"n_model", "n_human", "seed"}
//   GET  /sessions
//   GET  /sessions/:id/items        optional ?rater_id= adds that rater's score
//   GET  /sessions/:id/distribution
//   GET  /items/:id/image           image/png
//   POST /items/:id/scores          {"rater_id", "score"}
//   GET  /rubric
//
// Errors are {"code", "message"} with 400, 404 or 503.

#include <fstream>
#include <functional>
#include <iterator>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cxrgen/review.hpp"

namespace cxrgen {

using SessionFactory =
    std::function<ReviewSession(ReviewStore&, std::size_t n_model, std::size_t n_human, std::uint64_t seed)>;

inline SessionFactory make_session_factory(std::vector<SessionSource> sources, ReportGenerator generate) {
  return [sources = std::move(sources), generate = std::move(generate)](ReviewStore& store, std::size_t n_model,
                                                                          std::size_t n_human, std::uint64_t seed) {
    return store.create_session(sources, n_model, n_human, generate, seed);
  };
}

inline nlohmann::json rubric_json() {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : rubric()) levels.push_back({{"score", l.score}, {"text", l.text}});
  return {{"levels", levels}, {"acceptable_min", kAcceptableScore}};
}

class ReviewServer {
 public:
  ReviewServer(ReviewStore& store, SessionFactory factory) : store_(store), factory_(std::move(factory)) { routes(); }

  httplib::Server& http() { return http_; }

  // Port 0 picks a free port. Returns the bound port or -1.
  int bind(const std::string& host, int port) {
    return port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
  }
  bool listen() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  static void send(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void fail(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send(res, status, {{"code", code}, {"message", message}});
  }

  static nlohmann::json body_object(const httplib::Request& req) {
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ReviewError("validation", "request body must be a JSON object");
    return j;
  }

  static std::uint64_t unsigned_field(const nlohmann::json& j, const char* key, bool required) {
    if (!j.contains(key)) {
      if (required) throw ReviewError("validation", std::string("missing field '") + key + "'");
      return 0;
    }
    if (!j[key].is_number_unsigned()) {
      throw ReviewError("validation", std::string("'") + key + "' must be a non-negative integer");
    }
    return j[key].get<std::uint64_t>();
  }

  template <class F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ReviewError& e) {
        const int status = e.code == "not_found" ? 404 : e.code == "unavailable" ? 503 : 400;
        fail(res, status, e.code, e.what());
      } catch (const std::exception& e) {
        fail(res, 500, "internal", e.what());
      }
    };
  }

  void routes() {
    http_.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    http_.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    http_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!factory_) throw ReviewError("unavailable", "this server was started without a session source");
      const auto j = body_object(req);
      const auto n_model = unsigned_field(j, "n_model", true);
      const auto n_human = unsigned_field(j, "n_human", true);
      const auto seed = unsigned_field(j, "seed", false);
      const auto s = factory_(store_, n_model, n_human, seed);
      send(res, 201, {{"session_id", s.id}, {"items", s.items.size()}, {"created", s.created}});
    }));

    http_.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& id : store_.session_ids()) {
        const auto s = store_.session(id);
        out.push_back({{"session_id", id}, {"items", s.items.size()}, {"created", s.created}});
      }
      send(res, 200, {{"sessions", out}});
    }));

    http_.Get("/sessions/:id/items", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto& id = req.path_params.at("id");
      const auto s = store_.session(id);
      const auto rater = req.get_param_value("rater_id");
      std::map<std::string, int> mine;
      if (!rater.empty())
        for (const auto& r : store_.scores(id))
          if (r.rater_id == rater) mine[r.item_id] = r.score;
      nlohmann::json items = nlohmann::json::array();
      for (const auto& it : s.items) {
        auto p = rater_payload(it);
        if (!rater.empty()) p["score"] = mine.count(it.item_id) ? nlohmann::json(mine[it.item_id]) : nlohmann::json();
        items.push_back(std::move(p));
      }
      send(res, 200, {{"session_id", id}, {"items", items}});
    }));

    http_.Get("/sessions/:id/distribution", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, distribution_json(store_.distribution(req.path_params.at("id"))));
    }));

    http_.Get("/items/:id/image", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto item = store_.item(req.path_params.at("id"));
      std::ifstream in(item.image, std::ios::binary);
      if (!in) throw ReviewError("not_found", "image for item '" + item.item_id + "' is missing");
      std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
      res.status = 200;
      res.set_content(std::move(bytes), "image/png");
    }));

    http_.Post("/items/:id/scores", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto j = body_object(req);
      if (!j.contains("rater_id") || !j["rater_id"].is_string()) {
        throw ReviewError("validation", "'rater_id' must be a string");
      }
      if (!j.contains("score") || !j["score"].is_number_integer()) {
        throw ReviewError("validation", "'score' must be an integer from 1 to 5");
      }
      const auto score = j["score"].get<long long>();
      if (score < kMinScore || score > kMaxScore) {
        throw ReviewError("validation", "score must be between 1 and 5, got " + std::to_string(score));
      }
      const auto r = store_.submit_score(req.path_params.at("id"), j["rater_id"].get<std::string>(),
                                         static_cast<int>(score));
      send(res, 200, {{"item_id", r.item_id}, {"rater_id", r.rater_id}, {"score", r.score}, {"timestamp", r.timestamp}});
    }));

    http_.Get("/rubric", [](const httplib::Request&, httplib::Response& res) { send(res, 200, rubric_json()); });
  }

  ReviewStore& store_;
  SessionFactory factory_;
  httplib::Server http_;
};

}  // namespace cxrgen
