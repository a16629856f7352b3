#pragma once

// Consensus-based caption score over TF-IDF weighted n-grams.
//
//   g_k(s) = tf_k(s) / sum_l tf_l(s) * ln(|I| / df_k)
//   CIDEr_n(c, S) = 1/m sum_j cos(g^n(c), g^n(s_j))
//   CIDEr(c, S) = 1/N sum_n CIDEr_n
//
// df_k counts images whose reference set contains gram k at least once.
// Grams missing from the corpus get df = 1. A zero-norm vector scores 0.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cxrgen {

using Sentence = std::vector<std::string>;
using NGram = std::vector<std::string>;
using TfidfVector = std::map<NGram, double>;

inline std::map<NGram, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<NGram, std::size_t> out;
  if (n == 0 || s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[NGram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return out;
}

struct CiderStats {
  std::size_t max_n = 4;
  std::size_t n_images = 0;
  std::vector<std::map<NGram, std::size_t>> df;  // df[n - 1]

  std::size_t document_frequency(const NGram& g) const {
    if (g.empty() || g.size() > max_n) return 0;
    auto it = df[g.size() - 1].find(g);
    return it == df[g.size() - 1].end() ? 0 : it->second;
  }
};

// references[i] holds every reference sentence for image i.
inline CiderStats corpus_stats(const std::vector<std::vector<Sentence>>& references, std::size_t max_n = 4) {
  if (references.empty()) throw std::invalid_argument("corpus_stats: no images");
  if (max_n == 0) throw std::invalid_argument("corpus_stats: max_n must be positive");
  CiderStats st;
  st.max_n = max_n;
  st.n_images = references.size();
  st.df.resize(max_n);
  for (const auto& refs : references) {
    for (std::size_t n = 1; n <= max_n; ++n) {
      std::map<NGram, bool> seen;
      for (const auto& r : refs)
        for (auto& [g, _] : ngram_counts(r, n)) seen[g] = true;
      for (auto& [g, _] : seen) ++st.df[n - 1][g];
    }
  }
  return st;
}

inline TfidfVector tfidf(const Sentence& s, const CiderStats& st, std::size_t n) {
  if (n == 0 || n > st.max_n) throw std::invalid_argument("tfidf: n outside [1, " + std::to_string(st.max_n) + "]");
  TfidfVector out;
  const auto counts = ngram_counts(s, n);
  if (counts.empty()) return out;
  const double total = static_cast<double>(s.size() - n + 1);
  const double n_images = static_cast<double>(st.n_images);
  for (const auto& [g, tf] : counts) {
    const double df = static_cast<double>(std::max<std::size_t>(1, st.document_frequency(g)));
    const double w = static_cast<double>(tf) / total * std::log(n_images / df);
    if (w != 0.0) out.emplace(g, w);
  }
  return out;
}

inline double tfidf_norm(const TfidfVector& v) {
  double s = 0.0;
  for (const auto& [_, w] : v) s += w * w;
  return std::sqrt(s);
}

inline double cosine(const TfidfVector& a, const TfidfVector& b) {
  const double na = tfidf_norm(a), nb = tfidf_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0.0;
  for (const auto& [g, w] : a) {
    auto it = b.find(g);
    if (it != b.end()) dot += w * it->second;
  }
  return dot / (na * nb);
}

inline double cider_n(const Sentence& candidate, const std::vector<Sentence>& refs, const CiderStats& st, std::size_t n) {
  if (refs.empty()) throw std::invalid_argument("cider_n: at least one reference required");
  const auto gc = tfidf(candidate, st, n);
  double s = 0.0;
  for (const auto& r : refs) s += cosine(gc, tfidf(r, st, n));
  return s / static_cast<double>(refs.size());
}

inline double cider(const Sentence& candidate, const std::vector<Sentence>& refs, const CiderStats& st,
                    std::size_t max_n = 4) {
  if (max_n == 0 || max_n > st.max_n) throw std::invalid_argument("cider: max_n outside corpus statistics");
  double s = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) s += cider_n(candidate, refs, st, n);
  return s / static_cast<double>(max_n);
}

struct CorpusScore {
  std::vector<double> per_image;
  double mean = 0.0;
  double scale = 1.0;  // presentation multiplier already applied to the numbers above
};

inline CorpusScore corpus_cider(const std::vector<Sentence>& candidates,
                                const std::vector<std::vector<Sentence>>& references, const CiderStats& st,
                                std::size_t max_n = 4, double display_scale = 1.0) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("corpus_cider: " + std::to_string(candidates.size()) + " candidates for " +
                                std::to_string(references.size()) + " images");
  }
  if (candidates.empty()) throw std::invalid_argument("corpus_cider: empty corpus");
  CorpusScore out;
  out.scale = display_scale;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.per_image.push_back(display_scale * cider(candidates[i], references[i], st, max_n));
    out.mean += out.per_image.back();
  }
  out.mean /= static_cast<double>(candidates.size());
  return out;
}

// Equal-width bins over [0, top]; the last bin is closed.
inline std::vector<std::size_t> score_histogram(const std::vector<double>& scores, std::size_t bins = 10,
                                                double top = 1.0) {
  std::vector<std::size_t> h(bins, 0);
  for (double s : scores) {
    auto b = static_cast<std::size_t>(std::floor(std::clamp(s / top, 0.0, 1.0) * static_cast<double>(bins)));
    ++h[std::min(b, bins - 1)];
  }
  return h;
}

}  // namespace cxrgen
