#pragma once

// Encoder + decoder + vocabulary, and conversion to and from checkpoints.

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/beam_search.hpp"
#include "cxrgen/checkpoint.hpp"
#include "cxrgen/config.hpp"
#include "cxrgen/decoder.hpp"
#include "cxrgen/encoder.hpp"
#include "cxrgen/image.hpp"
#include "cxrgen/text.hpp"

namespace cxrgen {

class Model {
 public:
  Model(const EncoderConfig& enc, const DecoderConfig& dec, Vocabulary vocab, std::uint64_t seed)
      : Model(enc, dec, std::move(vocab), std::make_unique<Rng>(seed)) {}

  const Vocabulary& vocabulary() const { return vocab_; }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }

  std::vector<NamedTensor> tensors() const {
    auto out = encoder_.tensors();
    for (auto& nt : decoder_.tensors()) out.push_back(nt);
    return out;
  }

  std::vector<TensorRecord> export_tensors() const {
    std::vector<TensorRecord> out;
    for (const auto& nt : tensors()) {
      out.push_back({nt.name, nt.tensor.shape(), {nt.tensor.data().begin(), nt.tensor.data().end()}});
    }
    return out;
  }

  // Every model tensor must be present with a matching shape.
  void import_tensors(const std::vector<TensorRecord>& records) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (auto& nt : tensors()) {
      auto it = by_name.find(nt.name);
      if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor " + nt.name);
      if (it->second->shape != nt.tensor.shape()) {
        throw std::runtime_error("checkpoint tensor " + nt.name + " has shape " + shape_str(it->second->shape) +
                                 ", model expects " + shape_str(nt.tensor.shape()));
      }
      std::copy(it->second->data.begin(), it->second->data.end(), nt.tensor.mutable_data().begin());
    }
  }

  void check_vocabulary(const Vocabulary& other) const {
    if (!(other == vocab_)) {
      throw std::invalid_argument("vocabulary mismatch: model has " + std::to_string(vocab_.size()) +
                                  " tokens, supplied vocabulary has " + std::to_string(other.size()));
    }
  }

  Tensor prepare_image(const GrayImage& raw) const {
    return image_to_tensor(preprocess(raw, encoder_.config().input_size));
  }

  FeatureMap features(const Tensor& image) { return encoder_.forward(image, NormUpdate::none); }

  std::vector<Decoded> generate(const Tensor& image, const BeamConfig& beam) {
    NoGradGuard no_grad;
    return beam_search(decoder_, features(image), beam);
  }

 private:
  Model(const EncoderConfig& enc, const DecoderConfig& dec, Vocabulary vocab, std::unique_ptr<Rng> rng)
      : vocab_(std::move(vocab)),
        encoder_(enc, *rng),
        decoder_(dec, vocab_.size(), encoder_.output_channels(), enc.positions(), *rng) {}

  Vocabulary vocab_;
  Encoder encoder_;
  Decoder decoder_;
};

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = TrainConfig::parse(ckpt.config);
  Model m(cfg.encoder, cfg.decoder, Vocabulary::from_tokens(ckpt.vocabulary), 0);
  m.import_tensors(ckpt.tensors);
  m.encoder().set_trainable(cfg.encoder.frozen_blocks);
  return m;
}

}  // namespace cxrgen
