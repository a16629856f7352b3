#pragma once

// Densely connected convolutional encoder.
//
//   image [1 x S x S]
//     -> stem: 3x3 conv, stride 2                      (S/2, c0 channels)
//     -> dense block 1 -> transition 1 -> ... -> dense block n
//     -> norm + relu                                    V: [c x p]
//
// Each dense layer is norm -> relu -> 3x3 conv producing `growth_rate`
// channels, concatenated onto everything before it in the block, so a block
// of L layers turns c0 channels into c0 + L*g. A transition is norm -> relu
// -> 1x1 conv (to floor(c * compression) channels) -> 2x2 average pooling.
//
// Normalization uses per-channel running statistics held outside the graph.
// Parameters are grouped by block for freezing: the stem belongs to block 0
// and each transition to the block before it; the final norm is the head.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/image.hpp"
#include "cxrgen/random.hpp"
#include "cxrgen/tensor.hpp"

namespace cxrgen {

struct EncoderConfig {
  std::size_t n_blocks = 4;
  std::size_t layers_per_block = 6;
  std::size_t growth_rate = 32;
  std::size_t input_size = 256;
  std::size_t frozen_blocks = 2;
  std::size_t stem_channels = 64;
  double compression = 0.5;
  double norm_eps = 1e-5;
  double norm_momentum = 0.01;

  // Three blocks of two layers, growth 8, 64x64 input.
  static EncoderConfig desk() {
    EncoderConfig c;
    c.n_blocks = 3;
    c.layers_per_block = 2;
    c.growth_rate = 8;
    c.input_size = 64;
    c.frozen_blocks = 2;
    c.stem_channels = 16;
    return c;
  }

  void validate() const {
    if (n_blocks < 1) throw std::invalid_argument("encoder: n_blocks must be at least 1");
    if (frozen_blocks > n_blocks) throw std::invalid_argument("encoder: frozen_blocks exceeds n_blocks");
    if (layers_per_block < 1 || growth_rate < 1 || stem_channels < 1) {
      throw std::invalid_argument("encoder: layer counts and widths must be positive");
    }
    if (!(compression > 0.0 && compression <= 1.0)) throw std::invalid_argument("encoder: compression must be in (0, 1]");
    if (grid_side() < 1 || input_size % (std::size_t{1} << n_blocks) != 0) {
      throw std::invalid_argument("encoder: input_size must be divisible by 2^n_blocks");
    }
  }

  std::size_t grid_side() const { return input_size >> n_blocks; }
  std::size_t positions() const { return grid_side() * grid_side(); }

  std::size_t output_channels() const {
    std::size_t c = stem_channels;
    for (std::size_t b = 0; b < n_blocks; ++b) {
      c += layers_per_block * growth_rate;
      if (b + 1 < n_blocks) c = transition_channels(c);
    }
    return c;
  }

  std::size_t transition_channels(std::size_t c) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(c) * compression)));
  }
};

struct FeatureMap {
  Tensor V;      // [c x p]
  Tensor V_gav;  // [c], mean of each row of V
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t channels() const { return V.dim(0); }
  std::size_t positions() const { return V.dim(1); }
};

// Named tensor owned by a model. Buffers (running statistics) are saved in
// checkpoints but never optimized.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool is_buffer = false;
  std::size_t group = 0;
};

enum class NormUpdate {
  none,       // use running statistics as they are
  ema,        // fold per-sample statistics into trainable norms, then use
  calibrate,  // cumulative average over all images seen so far, then use
};

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stem_ = uniform_fan_in(Shape{cfg_.stem_channels, 1, 3, 3}, 9, rng);
    std::size_t c = cfg_.stem_channels;
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
      Block block;
      for (std::size_t l = 0; l < cfg_.layers_per_block; ++l) {
        block.layers.push_back(make_unit(c, cfg_.growth_rate, 3, rng));
        c += cfg_.growth_rate;
      }
      if (b + 1 < cfg_.n_blocks) {
        block.transition = make_unit(c, cfg_.transition_channels(c), 1, rng);
        block.has_transition = true;
        c = cfg_.transition_channels(c);
      }
      blocks_.push_back(std::move(block));
    }
    head_ = make_norm(c);
    set_trainable(cfg_.frozen_blocks);
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t output_channels() const { return head_.gamma.size(); }
  std::size_t output_positions() const { return cfg_.positions(); }

  FeatureMap forward(const Tensor& image, NormUpdate update = NormUpdate::none) {
    if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != cfg_.input_size || image.dim(2) != cfg_.input_size) {
      throw std::invalid_argument("encoder: expected input [1x" + std::to_string(cfg_.input_size) + "x" +
                                  std::to_string(cfg_.input_size) + "], got " + shape_str(image.shape()));
    }
    Tensor x = conv2d(image, stem_, 2, 1);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Block& block = blocks_[b];
      const bool trainable = b >= frozen_blocks_;
      for (auto& unit : block.layers) x = concat({x, apply_unit(unit, x, 1, update, trainable)});
      if (block.has_transition) x = avg_pool2d(apply_unit(block.transition, x, 0, update, trainable), 2);
    }
    x = relu(apply_norm(head_, x, update, true));
    const std::size_t side = x.dim(1);
    FeatureMap fm;
    fm.V = reshape(x, Shape{x.dim(0), side * x.dim(2)});
    fm.V_gav = row_mean(fm.V);
    fm.grid_rows = side;
    fm.grid_cols = x.dim(2);
    return fm;
  }

  FeatureMap forward(const GrayImage& preprocessed, NormUpdate update = NormUpdate::none) {
    return forward(image_to_tensor(preprocessed), update);
  }

  // Blocks [0, frozen_blocks) stop receiving gradients; their running
  // statistics stop updating too. The head norm is always trainable.
  void set_trainable(std::size_t frozen_blocks) {
    if (frozen_blocks > cfg_.n_blocks) {
      throw std::invalid_argument("set_trainable: frozen_blocks " + std::to_string(frozen_blocks) +
                                  " exceeds n_blocks " + std::to_string(cfg_.n_blocks));
    }
    frozen_blocks_ = frozen_blocks;
    for (auto& nt : tensors()) {
      if (!nt.is_buffer) nt.tensor.set_requires_grad(nt.group >= frozen_blocks_);
    }
  }

  std::size_t frozen_blocks() const { return frozen_blocks_; }

  // Every parameter and buffer, in a fixed order.
  std::vector<NamedTensor> tensors() const {
    std::vector<NamedTensor> out;
    out.push_back({"encoder.stem.kernel", stem_, false, 0});
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string prefix = "encoder.block" + std::to_string(b);
      for (std::size_t l = 0; l < blocks_[b].layers.size(); ++l) {
        add_unit(out, prefix + ".layer" + std::to_string(l), blocks_[b].layers[l], b);
      }
      if (blocks_[b].has_transition) add_unit(out, prefix + ".transition", blocks_[b].transition, b);
    }
    add_norm(out, "encoder.head.norm", head_, cfg_.n_blocks);
    return out;
  }

  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : tensors())
      if (!nt.is_buffer && nt.group >= frozen_blocks_) out.push_back(nt.tensor);
    return out;
  }

  std::vector<Tensor> frozen_parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : tensors())
      if (!nt.is_buffer && nt.group < frozen_blocks_) out.push_back(nt.tensor);
    return out;
  }

  // Sets running statistics from the given images, layer by layer in one
  // pass each, and resets the calibration counters afterwards.
  void calibrate(const std::vector<Tensor>& images) {
    calibration_count_ = 0;
    for (const auto& img : images) {
      forward(img, NormUpdate::calibrate);
      ++calibration_count_;
    }
    calibration_count_ = 0;
  }

 private:
  struct Norm {
    Tensor gamma, beta, running_mean, running_var;
  };
  struct Unit {
    Norm norm;
    Tensor kernel;
  };
  struct Block {
    std::vector<Unit> layers;
    Unit transition;
    bool has_transition = false;
  };

  static Norm make_norm(std::size_t c) {
    return {Tensor(Shape{c}, 1.0, true), Tensor(Shape{c}, 0.0, true), Tensor(Shape{c}, 0.0), Tensor(Shape{c}, 1.0)};
  }

  static Unit make_unit(std::size_t c_in, std::size_t c_out, std::size_t k, Rng& rng) {
    return {make_norm(c_in), uniform_fan_in(Shape{c_out, c_in, k, k}, c_in * k * k, rng)};
  }

  static void add_norm(std::vector<NamedTensor>& out, const std::string& name, const Norm& n, std::size_t group) {
    out.push_back({name + ".gamma", n.gamma, false, group});
    out.push_back({name + ".beta", n.beta, false, group});
    out.push_back({name + ".running_mean", n.running_mean, true, group});
    out.push_back({name + ".running_var", n.running_var, true, group});
  }

  static void add_unit(std::vector<NamedTensor>& out, const std::string& name, const Unit& u, std::size_t group) {
    add_norm(out, name + ".norm", u.norm, group);
    out.push_back({name + ".kernel", u.kernel, false, group});
  }

  Tensor apply_unit(Unit& unit, const Tensor& x, std::size_t padding, NormUpdate update, bool trainable) {
    return conv2d(relu(apply_norm(unit.norm, x, update, trainable)), unit.kernel, 1, padding);
  }

  Tensor apply_norm(Norm& n, const Tensor& x, NormUpdate update, bool trainable) {
    const std::size_t c = x.dim(0), per = x.size() / c;
    if (update == NormUpdate::calibrate || (update == NormUpdate::ema && trainable)) {
      auto mean = n.running_mean.mutable_data();
      auto var = n.running_var.mutable_data();
      const auto xd = x.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
          const double v = xd[ch * per + i];
          s += v;
          s2 += v * v;
        }
        const double m = s / static_cast<double>(per);
        const double v = std::max(0.0, s2 / static_cast<double>(per) - m * m);
        if (update == NormUpdate::calibrate) {
          // Running average of per-image moments over calibration images.
          const double k = static_cast<double>(calibration_count_);
          const double second = (var[ch] + mean[ch] * mean[ch]) * k / (k + 1) + (v + m * m) / (k + 1);
          mean[ch] = mean[ch] * k / (k + 1) + m / (k + 1);
          var[ch] = std::max(0.0, second - mean[ch] * mean[ch]);
        } else {
          const double mom = cfg_.norm_momentum;
          mean[ch] = (1 - mom) * mean[ch] + mom * m;
          var[ch] = (1 - mom) * var[ch] + mom * v;
        }
      }
    }
    return channel_norm(x, n.gamma, n.beta, n.running_mean.data(), n.running_var.data(), cfg_.norm_eps);
  }

  EncoderConfig cfg_;
  Tensor stem_;
  std::vector<Block> blocks_;
  Norm head_;
  std::size_t frozen_blocks_ = 0;
  std::size_t calibration_count_ = 0;
};

}  // namespace cxrgen
