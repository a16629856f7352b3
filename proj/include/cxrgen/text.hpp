#pragma once

// Report tokenization, vocabulary construction and index encoding.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace cxrgen {

// Splits on ASCII whitespace; each ASCII punctuation character becomes its
// own token; ASCII letters are lowercased. Bytes >= 0x80 pass through, so
// UTF-8 text segments at whitespace and punctuation boundaries.
inline std::vector<std::string> segment(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

using TokenIndex = std::size_t;

class Vocabulary {
 public:
  static constexpr TokenIndex kNou = 0;
  static constexpr TokenIndex kStart = 1;
  static constexpr TokenIndex kEnd = 2;
  static constexpr int kFormatVersion = 1;

  inline static const std::string kNouToken = "<nou>";
  inline static const std::string kStartToken = "<start>";
  inline static const std::string kEndToken = "<end>";

  Vocabulary() : tokens_{kNouToken, kStartToken, kEndToken} { reindex(); }

  // Tokens seen at least `min_count` times get indices in order of first
  // appearance; rarer ones fall back to <nou>.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count = 3) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::unordered_map<std::string, std::size_t> counts;
    std::vector<std::string> order;
    for (const auto& sentence : corpus)
      for (const auto& tok : sentence)
        if (counts[tok]++ == 0) order.push_back(tok);
    Vocabulary vocab;
    for (const auto& tok : order) {
      if (counts[tok] >= min_count && !vocab.contains(tok)) vocab.append(tok);
    }
    return vocab;
  }

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 3 || tokens[kNou] != kNouToken || tokens[kStart] != kStartToken || tokens[kEnd] != kEndToken) {
      throw std::invalid_argument("vocabulary: first three tokens must be <nou>, <start>, <end>");
    }
    Vocabulary vocab;
    vocab.tokens_ = std::move(tokens);
    vocab.reindex();
    if (vocab.index_.size() != vocab.tokens_.size()) throw std::invalid_argument("vocabulary: duplicate tokens");
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenIndex index_of(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kNou : it->second;
  }

  const std::string& token(TokenIndex i) const {
    if (i >= tokens_.size()) {
      throw std::out_of_range("vocabulary: index " + std::to_string(i) + " outside vocabulary of size " +
                              std::to_string(tokens_.size()));
    }
    return tokens_[i];
  }

  nlohmann::json to_json() const { return {{"version", kFormatVersion}, {"tokens", tokens_}}; }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kFormatVersion) throw std::invalid_argument("vocabulary: unsupported version");
    return from_tokens(j.at("tokens").get<std::vector<std::string>>());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void append(const std::string& tok) {
    index_.emplace(tok, tokens_.size());
    tokens_.push_back(tok);
  }
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenIndex> index_;
};

// Index sequence [<start>, w1, ..., wn, <end>]; length() = n + 1.
struct TokenizedReport {
  std::vector<TokenIndex> indices;

  std::size_t length() const { return indices.empty() ? 0 : indices.size() - 1; }

  bool well_formed() const {
    if (indices.size() < 2 || indices.front() != Vocabulary::kStart || indices.back() != Vocabulary::kEnd) return false;
    for (std::size_t i = 1; i + 1 < indices.size(); ++i) {
      if (indices[i] == Vocabulary::kStart || indices[i] == Vocabulary::kEnd) return false;
    }
    return true;
  }

  friend bool operator==(const TokenizedReport&, const TokenizedReport&) = default;
};

inline TokenizedReport encode(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  TokenizedReport r;
  r.indices.reserve(tokens.size() + 2);
  r.indices.push_back(Vocabulary::kStart);
  for (const auto& t : tokens) r.indices.push_back(vocab.index_of(t));
  r.indices.push_back(Vocabulary::kEnd);
  return r;
}

// Body tokens with specials removed.
inline std::vector<std::string> decode_tokens(const std::vector<TokenIndex>& indices, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (auto i : indices) {
    const auto& tok = vocab.token(i);
    if (i != Vocabulary::kNou && i != Vocabulary::kStart && i != Vocabulary::kEnd) out.push_back(tok);
  }
  return out;
}

inline std::string decode(const std::vector<TokenIndex>& indices, const Vocabulary& vocab) {
  return join_tokens(decode_tokens(indices, vocab));
}

}  // namespace cxrgen
