#pragma once

// Attention-gated LSTM decoder.
//
// One step, given the previous word y, the encoder features (V, V_gav) and the
// state (h, c):
//
//   [i f o g] = [sigmoid sigmoid sigmoid tanh](W_gates [E[:,y]; V_gav; h] + b)
//   c' = f * c + i * g
//   h' = o * tanh(c')
//   alpha = softmax(W_att_h h' + (W_att_v V)^T)          over p positions
//   ctx = V alpha                                          [c]
//   word_dist = softmax(W_out_h h' + W_out_c ctx)          over e words
//
// The LSTM input is the embedded word, so W_gates has emb + c + h columns.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/encoder.hpp"
#include "cxrgen/random.hpp"
#include "cxrgen/tensor.hpp"
#include "cxrgen/text.hpp"

namespace cxrgen {

struct DecoderConfig {
  std::size_t hidden_size = 512;
  std::size_t embedding_size = 256;
  bool gate_bias = true;
  double log_floor = 1e-12;

  static DecoderConfig desk() {
    DecoderConfig c;
    c.hidden_size = 64;
    c.embedding_size = 32;
    return c;
  }
};

struct DecoderState {
  Tensor h;
  Tensor c;

  static DecoderState zeros(std::size_t hidden) { return {Tensor(Shape{hidden}, 0.0), Tensor(Shape{hidden}, 0.0)}; }
};

struct StepOutput {
  DecoderState state;
  Tensor alpha;      // [p]
  Tensor word_dist;  // [e]
};

// Per-sequence constants derived from the feature map.
struct AttentionContext {
  Tensor V;
  Tensor V_gav;
  Tensor visual_logits;  // (W_att_v V)^T, [p]
};

struct LossStats {
  std::size_t clamped = 0;  // truth probabilities that hit the log floor
};

struct Rollout {
  Tensor loss;
  std::vector<Tensor> alphas;
};

struct Decoded {
  TokenizedReport report;
  double log_prob = 0.0;
  bool finished = false;
  std::vector<std::vector<double>> alphas;  // one per emitted token, including <end>
};

// Mean negative log-probability of truth[1..l]; probabilities below the log
// floor are clamped and counted.
inline Tensor sequence_loss(const std::vector<Tensor>& word_dists, const TokenizedReport& truth,
                            double log_floor = 1e-12, LossStats* stats = nullptr) {
  const std::size_t l = truth.length();
  if (word_dists.size() != l || l == 0) {
    throw std::invalid_argument("sequence_loss: " + std::to_string(word_dists.size()) + " distributions for " +
                                std::to_string(l) + " target positions");
  }
  std::vector<Tensor> terms;
  terms.reserve(l);
  for (std::size_t j = 0; j < l; ++j) {
    Tensor p = pick(word_dists[j], truth.indices[j + 1]);
    if (stats && p.item() < log_floor) ++stats->clamped;
    terms.push_back(log(p, log_floor));
  }
  return scale(sum(concat(terms)), -1.0 / static_cast<double>(l));
}

// Highest-probability token, lowest index on ties. <start> is never a valid
// continuation and is skipped.
inline TokenIndex argmax_token(std::span<const double> dist) {
  TokenIndex best = Vocabulary::kNou;
  for (TokenIndex i = 1; i < dist.size(); ++i) {
    if (i == Vocabulary::kStart) continue;
    if (dist[i] > dist[best]) best = i;
  }
  return best;
}

class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, std::size_t vocab_size, std::size_t channels, std::size_t positions, Rng& rng)
      : cfg_(cfg), vocab_(vocab_size), channels_(channels), positions_(positions) {
    if (vocab_size < 3 || channels == 0 || positions == 0 || cfg.hidden_size == 0 || cfg.embedding_size == 0) {
      throw std::invalid_argument("decoder: all dimensions must be positive and vocabulary at least 3");
    }
    const std::size_t h = cfg.hidden_size, in = cfg.embedding_size + channels + h;
    W_gates_ = uniform_fan_in(Shape{4 * h, in}, in, rng);
    b_gates_ = Tensor(Shape{4 * h}, 0.0, cfg.gate_bias);
    if (cfg.gate_bias) {
      auto b = b_gates_.mutable_data();
      std::fill(b.begin() + static_cast<long>(h), b.begin() + static_cast<long>(2 * h), 1.0);  // forget gate
    }
    E_ = uniform_fan_in(Shape{cfg.embedding_size, vocab_size}, vocab_size, rng);
    W_att_h_ = uniform_fan_in(Shape{positions, h}, h, rng);
    W_att_v_ = uniform_fan_in(Shape{1, channels}, channels, rng);
    W_out_h_ = uniform_fan_in(Shape{vocab_size, h}, h, rng);
    W_out_c_ = uniform_fan_in(Shape{vocab_size, channels}, channels, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_; }
  std::size_t channels() const { return channels_; }
  std::size_t positions() const { return positions_; }

  std::vector<NamedTensor> tensors() const {
    std::vector<NamedTensor> out{{"decoder.W_gates", W_gates_}, {"decoder.E", E_},
                                 {"decoder.W_att_h", W_att_h_}, {"decoder.W_att_v", W_att_v_},
                                 {"decoder.W_out_h", W_out_h_}, {"decoder.W_out_c", W_out_c_}};
    if (cfg_.gate_bias) out.push_back({"decoder.b_gates", b_gates_});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : tensors()) out.push_back(nt.tensor);
    return out;
  }

  DecoderState initial_state() const { return DecoderState::zeros(cfg_.hidden_size); }

  AttentionContext prepare(const FeatureMap& features) const {
    if (features.channels() != channels_ || features.positions() != positions_) {
      throw std::invalid_argument("decoder: feature map " + shape_str(features.V.shape()) + " does not match [" +
                                  std::to_string(channels_) + "x" + std::to_string(positions_) + "]");
    }
    return {features.V, features.V_gav, reshape(matmul(W_att_v_, features.V), Shape{positions_})};
  }

  StepOutput step(TokenIndex y_prev, const AttentionContext& ctx, const DecoderState& state) const {
    if (y_prev >= vocab_) {
      throw std::out_of_range("decoder: token " + std::to_string(y_prev) + " outside vocabulary of size " +
                              std::to_string(vocab_));
    }
    if (state.h.size() != cfg_.hidden_size || state.c.size() != cfg_.hidden_size) {
      throw std::invalid_argument("decoder: state size does not match hidden size");
    }
    const std::size_t h = cfg_.hidden_size;
    Tensor x = concat({column(E_, y_prev), ctx.V_gav, state.h});
    Tensor z = matmul(W_gates_, x);
    if (cfg_.gate_bias) z = add(z, b_gates_);
    Tensor i = sigmoid(slice(z, 0, h));
    Tensor f = sigmoid(slice(z, h, 2 * h));
    Tensor o = sigmoid(slice(z, 2 * h, 3 * h));
    Tensor g = tanh(slice(z, 3 * h, 4 * h));
    Tensor c = add(mul(f, state.c), mul(i, g));
    Tensor hn = mul(o, tanh(c));
    Tensor alpha = softmax(add(matmul(W_att_h_, hn), ctx.visual_logits));
    Tensor context = matmul(ctx.V, alpha);
    Tensor word_dist = softmax(add(matmul(W_out_h_, hn), matmul(W_out_c_, context)));
    return {{hn, c}, alpha, word_dist};
  }

  StepOutput step(TokenIndex y_prev, const FeatureMap& features, const DecoderState& state) const {
    return step(y_prev, prepare(features), state);
  }

  // Feeds truth[j-1] at step j for j = 1..l and scores truth[j].
  Rollout teacher_forced_rollout(const FeatureMap& features, const TokenizedReport& truth,
                                 LossStats* stats = nullptr) const {
    if (!truth.well_formed()) throw std::invalid_argument("teacher_forced_rollout: malformed target sequence");
    const auto ctx = prepare(features);
    DecoderState state = initial_state();
    std::vector<Tensor> dists;
    Rollout r;
    for (std::size_t j = 1; j < truth.indices.size(); ++j) {
      auto out = step(truth.indices[j - 1], ctx, state);
      state = out.state;
      dists.push_back(out.word_dist);
      r.alphas.push_back(out.alpha);
    }
    r.loss = sequence_loss(dists, truth, stats);
    return r;
  }

  Tensor sequence_loss(const std::vector<Tensor>& word_dists, const TokenizedReport& truth,
                       LossStats* stats = nullptr) const {
    return cxrgen::sequence_loss(word_dists, truth, cfg_.log_floor, stats);
  }

  // Argmax decoding from <start> (see argmax_token). Stops at <end>
  // or after max_len steps, in which case <end> is appended unscored.
  Decoded generate_greedy(const FeatureMap& features, std::size_t max_len) const {
    if (max_len < 1) throw std::invalid_argument("generate_greedy: max_len must be at least 1");
    NoGradGuard no_grad;
    const auto ctx = prepare(features);
    DecoderState state = initial_state();
    Decoded d;
    d.report.indices.push_back(Vocabulary::kStart);
    TokenIndex prev = Vocabulary::kStart;
    for (std::size_t t = 0; t < max_len; ++t) {
      auto out = step(prev, ctx, state);
      state = out.state;
      const auto dist = out.word_dist.data();
      const TokenIndex best = argmax_token(dist);
      d.log_prob += std::log(dist[best]);
      d.alphas.emplace_back(out.alpha.data().begin(), out.alpha.data().end());
      d.report.indices.push_back(best);
      prev = best;
      if (best == Vocabulary::kEnd) {
        d.finished = true;
        break;
      }
    }
    if (!d.finished) d.report.indices.push_back(Vocabulary::kEnd);
    return d;
  }

 private:
  DecoderConfig cfg_;
  std::size_t vocab_, channels_, positions_;
  Tensor W_gates_, b_gates_, E_, W_att_h_, W_att_v_, W_out_h_, W_out_c_;
};

}  // namespace cxrgen
