#pragma once

// Beam decoding over Decoder::step.
//
// Each round expands every live hypothesis by every token except <start>,
// keeps the best `beam_width` candidates, and retires those ending in <end>
// to a completed pool. Candidates are ordered by score, then token index,
// then the age of the parent hypothesis (older first).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cxrgen/decoder.hpp"

namespace cxrgen {

struct BeamConfig {
  std::size_t beam_width = 3;
  std::size_t max_len = 60;
  std::size_t n_best = 3;
  bool length_normalize = false;  // rank by log_prob / emitted tokens

  void validate() const {
    if (beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be at least 1");
    if (n_best < 1 || n_best > beam_width) throw std::invalid_argument("beam_search: n_best must be in [1, beam_width]");
    if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be at least 1");
  }
};

struct BeamHypothesis {
  std::vector<TokenIndex> indices;
  double log_prob = 0.0;
  DecoderState state;
  std::vector<std::vector<double>> alphas;
  bool finished = false;
  std::size_t serial = 0;  // creation order; lower is older

  // Tokens emitted after <start>.
  std::size_t emitted() const { return indices.size() - 1; }
};

inline double beam_score(const BeamHypothesis& h, bool length_normalize) {
  if (!length_normalize || h.emitted() == 0) return h.log_prob;
  return h.log_prob / static_cast<double>(h.emitted());
}

// Up to n_best hypotheses, best first. Completed hypotheses come first; if
// fewer than n_best complete, the best unfinished ones fill in with <end>
// appended unscored.
inline std::vector<Decoded> beam_search(const Decoder& decoder, const FeatureMap& features, const BeamConfig& cfg) {
  cfg.validate();
  NoGradGuard no_grad;
  const auto ctx = decoder.prepare(features);
  std::size_t serial = 0;

  std::vector<BeamHypothesis> live(1);
  live[0].indices = {Vocabulary::kStart};
  live[0].state = decoder.initial_state();
  live[0].serial = serial++;
  std::vector<BeamHypothesis> pool;

  auto by_rank = [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    const double sa = beam_score(a, cfg.length_normalize), sb = beam_score(b, cfg.length_normalize);
    if (sa != sb) return sa > sb;
    return a.serial < b.serial;
  };

  struct Candidate {
    double log_prob;
    TokenIndex token;
    std::size_t parent;  // index into live
  };

  for (std::size_t t = 0; t < cfg.max_len && !live.empty(); ++t) {
    std::vector<StepOutput> outs;
    std::vector<Candidate> cands;
    for (std::size_t k = 0; k < live.size(); ++k) {
      outs.push_back(decoder.step(live[k].indices.back(), ctx, live[k].state));
      const auto dist = outs.back().word_dist.data();
      for (TokenIndex w = 0; w < dist.size(); ++w) {
        if (w == Vocabulary::kStart) continue;
        cands.push_back({live[k].log_prob + std::log(dist[w]), w, k});
      }
    }
    const std::size_t keep = std::min(cfg.beam_width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.token != b.token) return a.token < b.token;
                        return live[a.parent].serial < live[b.parent].serial;
                      });

    std::vector<BeamHypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = cands[i];
      const BeamHypothesis& parent = live[c.parent];
      BeamHypothesis h;
      h.indices = parent.indices;
      h.indices.push_back(c.token);
      h.log_prob = c.log_prob;
      h.state = outs[c.parent].state;
      h.alphas = parent.alphas;
      const auto a = outs[c.parent].alpha.data();
      h.alphas.emplace_back(a.begin(), a.end());
      h.serial = serial++;
      h.finished = c.token == Vocabulary::kEnd;
      (h.finished ? pool : next).push_back(std::move(h));
    }
    live = std::move(next);

    // Raw log probabilities only fall as hypotheses grow, so once the pool's
    // n_best-th entry beats every live score nothing can overtake it.
    if (!cfg.length_normalize && pool.size() >= cfg.n_best) {
      std::vector<double> scores;
      for (auto& h : pool) scores.push_back(h.log_prob);
      std::nth_element(scores.begin(), scores.begin() + static_cast<long>(cfg.n_best - 1), scores.end(),
                       std::greater<>());
      const double threshold = scores[cfg.n_best - 1];
      const bool done = std::all_of(live.begin(), live.end(), [&](auto& h) { return h.log_prob < threshold; });
      if (done) break;
    }
  }

  std::stable_sort(pool.begin(), pool.end(), by_rank);
  std::stable_sort(live.begin(), live.end(), by_rank);
  std::vector<Decoded> out;
  auto emit = [&](BeamHypothesis& h) {
    Decoded d;
    d.report.indices = std::move(h.indices);
    if (!h.finished) d.report.indices.push_back(Vocabulary::kEnd);
    d.log_prob = h.log_prob;
    d.finished = h.finished;
    d.alphas = std::move(h.alphas);
    out.push_back(std::move(d));
  };
  for (auto& h : pool) {
    if (out.size() == cfg.n_best) break;
    emit(h);
  }
  for (auto& h : live) {
    if (out.size() == cfg.n_best) break;
    emit(h);
  }
  return out;
}

}  // namespace cxrgen
