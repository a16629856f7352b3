#pragma once

// Beam decoding over a split, scored per image as the best CIDEr among the
// returned beams, plus finding recovery by template inversion.

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cxrgen/beam_search.hpp"
#include "cxrgen/cider.hpp"
#include "cxrgen/model.hpp"
#include "cxrgen/synth.hpp"
#include "cxrgen/train.hpp"

namespace cxrgen {

struct ItemEvaluation {
  std::string id;
  std::string reference;
  std::vector<std::string> beams;  // decoded text, rank order
  std::vector<double> log_probs;
  std::vector<double> scores;  // CIDEr per beam
  double best = 0.0;
  std::vector<std::string> true_findings;
  std::vector<std::string> predicted_findings;  // from the rank-1 beam

  bool findings_match() const { return canonical_findings(true_findings) == predicted_findings; }
};

struct EvaluationResult {
  std::vector<ItemEvaluation> items;
  double mean_best = 0.0;
  double mean_rank1 = 0.0;
  double finding_agreement = 0.0;  // fraction of images whose findings are recovered exactly
  std::vector<std::size_t> histogram;  // best scores in ten bins over [0, 1]
  double scale = 1.0;
};

using Generator = std::function<std::vector<Decoded>(const Example&)>;

// References come from the evaluated split, and so do the document
// frequencies.
inline EvaluationResult evaluate(const Generator& generate, const Vocabulary& vocab, const std::vector<Example>& xs,
                                 double display_scale = 1.0) {
  if (xs.empty()) throw std::invalid_argument("evaluate: split is empty");
  std::vector<std::vector<Sentence>> refs;
  for (const auto& e : xs) refs.push_back({segment(e.report)});
  const auto stats = corpus_stats(refs);

  EvaluationResult out;
  out.scale = display_scale;
  std::vector<double> unscaled;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& e = xs[i];
    ItemEvaluation item;
    item.id = e.id;
    item.reference = e.report;
    item.true_findings = e.findings;
    for (const auto& d : generate(e)) {
      const auto words = decode_tokens(d.report.indices, vocab);
      item.beams.push_back(join_tokens(words));
      item.log_probs.push_back(d.log_prob);
      item.scores.push_back(cider(words, refs[i], stats));
    }
    item.best = item.scores.empty() ? 0.0 : *std::max_element(item.scores.begin(), item.scores.end());
    item.predicted_findings = item.beams.empty() ? std::vector<std::string>{} : invert_report(item.beams[0]);
    agree += item.findings_match();
    unscaled.push_back(item.best);
    out.mean_best += item.best;
    out.mean_rank1 += item.scores.empty() ? 0.0 : item.scores[0];
    for (auto& s : item.scores) s *= display_scale;
    item.best *= display_scale;
    out.items.push_back(std::move(item));
  }
  const double n = static_cast<double>(xs.size());
  out.mean_best = display_scale * out.mean_best / n;
  out.mean_rank1 = display_scale * out.mean_rank1 / n;
  out.finding_agreement = static_cast<double>(agree) / n;
  out.histogram = score_histogram(unscaled, 10, 1.0);
  return out;
}

inline EvaluationResult evaluate(Model& model, const std::vector<Example>& xs, const BeamConfig& beam,
                                 double display_scale = 1.0) {
  return evaluate([&](const Example& e) { return model.generate(e.image, beam); }, model.vocabulary(), xs,
                  display_scale);
}

// The checkpoint must carry the vocabulary the data was encoded with.
inline EvaluationResult evaluate(const Checkpoint& ckpt, const Vocabulary& expected, const std::vector<Example>& xs,
                                 const BeamConfig& beam, double display_scale = 1.0) {
  auto model = model_from_checkpoint(ckpt);
  model.check_vocabulary(expected);
  return evaluate(model, xs, beam, display_scale);
}

// Most frequent report text among the examples; on ties the one that reached
// the count first wins.
inline std::string majority_report(const std::vector<Example>& xs) {
  std::map<std::string, std::size_t> counts;
  std::string best;
  std::size_t best_count = 0;
  for (const auto& e : xs) {
    const auto key = join_tokens(segment(e.report));
    if (++counts[key] > best_count) {
      best_count = counts[key];
      best = key;
    }
  }
  return best;
}

// Per-image CIDEr of emitting the same text for every image.
inline std::vector<double> constant_report_scores(const std::string& text, const std::vector<Example>& xs) {
  std::vector<std::vector<Sentence>> refs;
  for (const auto& e : xs) refs.push_back({segment(e.report)});
  const auto stats = corpus_stats(refs);
  std::vector<double> out;
  const auto words = segment(text);
  for (const auto& r : refs) out.push_back(cider(words, r, stats));
  return out;
}

}  // namespace cxrgen
