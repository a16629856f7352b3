#pragma once

// Training configuration and its flat key=value text form.
//
//   # comment
//   lr_encoder = 0.0001
//   epochs = 10
//
// Unknown keys and malformed values are errors. Defaults are the desk-scale
// model; configs/full.cfg holds the full-size settings.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "cxrgen/dataset.hpp"
#include "cxrgen/decoder.hpp"
#include "cxrgen/encoder.hpp"

namespace cxrgen {

struct TrainConfig {
  double lr_encoder = 1e-4;
  double lr_decoder = 5e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  SplitRatios split;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables
  std::size_t min_count = 3;
  EncoderConfig encoder = EncoderConfig::desk();
  DecoderConfig decoder = DecoderConfig::desk();
  std::size_t pretrain_epochs = 0;  // 0 skips the classification pretraining pass
  std::size_t pretrain_samples = 200;
  double lr_pretrain = 1e-2;
  std::size_t calibration_images = 64;
  std::size_t max_len = 40;
  std::size_t beam_width = 3;
  bool val_cider = true;

  void validate() const {
    if (!(lr_encoder > 0) || !(lr_decoder > 0) || !(lr_pretrain > 0)) {
      throw std::invalid_argument("config: learning rates must be positive");
    }
    if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
      throw std::invalid_argument("config: split ratios must sum to 1");
    }
    if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
    if (max_len == 0 || beam_width == 0) throw std::invalid_argument("config: max_len and beam_width must be positive");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0)) {
      throw std::invalid_argument("config: invalid Adam constants");
    }
    encoder.validate();
  }

  void set(const std::string& key, const std::string& value) {
    auto it = fields().find(key);
    if (it == fields().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second.set(*this, value);
  }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& [key, f] : fields()) out << key << " = " << f.get(*this) << '\n';
    return out.str();
  }

  static TrainConfig parse(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
      }
      try {
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    cfg.validate();
    return cfg;
  }

  static TrainConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

 private:
  struct Field {
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
  };

  static double to_double(const std::string& v) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("not a number: '" + v + "'");
    return out;
  }
  static std::uint64_t to_uint(const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
    return out;
  }
  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("not a boolean: '" + v + "'");
  }
  static std::string from_double(double d) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
    return std::string(buf, p);
  }

  static const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = [] {
      std::map<std::string, Field> m;
      auto real = [&](const std::string& k, auto access) {
        m[k] = {[=](TrainConfig& c, const std::string& v) { access(c) = to_double(v); },
                [=](const TrainConfig& c) { return from_double(access(c)); }};
      };
      auto whole = [&](const std::string& k, auto access) {
        m[k] = {[=](TrainConfig& c, const std::string& v) { access(c) = static_cast<std::remove_cvref_t<decltype(access(c))>>(to_uint(v)); },
                [=](const TrainConfig& c) { return std::to_string(access(c)); }};
      };
      auto flag = [&](const std::string& k, auto access) {
        m[k] = {[=](TrainConfig& c, const std::string& v) { access(c) = to_bool(v); },
                [=](const TrainConfig& c) { return std::string(access(c) ? "true" : "false"); }};
      };
      real("lr_encoder", [](auto& c) -> auto& { return c.lr_encoder; });
      real("lr_decoder", [](auto& c) -> auto& { return c.lr_decoder; });
      real("lr_pretrain", [](auto& c) -> auto& { return c.lr_pretrain; });
      real("split_train", [](auto& c) -> auto& { return c.split.train; });
      real("split_val", [](auto& c) -> auto& { return c.split.val; });
      real("split_test", [](auto& c) -> auto& { return c.split.test; });
      real("adam_beta1", [](auto& c) -> auto& { return c.adam_beta1; });
      real("adam_beta2", [](auto& c) -> auto& { return c.adam_beta2; });
      real("adam_eps", [](auto& c) -> auto& { return c.adam_eps; });
      real("clip_norm", [](auto& c) -> auto& { return c.clip_norm; });
      real("norm_momentum", [](auto& c) -> auto& { return c.encoder.norm_momentum; });
      real("compression", [](auto& c) -> auto& { return c.encoder.compression; });
      whole("batch_size", [](auto& c) -> auto& { return c.batch_size; });
      whole("epochs", [](auto& c) -> auto& { return c.epochs; });
      whole("seed", [](auto& c) -> auto& { return c.seed; });
      whole("min_count", [](auto& c) -> auto& { return c.min_count; });
      whole("pretrain_epochs", [](auto& c) -> auto& { return c.pretrain_epochs; });
      whole("pretrain_samples", [](auto& c) -> auto& { return c.pretrain_samples; });
      whole("calibration_images", [](auto& c) -> auto& { return c.calibration_images; });
      whole("max_len", [](auto& c) -> auto& { return c.max_len; });
      whole("beam_width", [](auto& c) -> auto& { return c.beam_width; });
      whole("n_blocks", [](auto& c) -> auto& { return c.encoder.n_blocks; });
      whole("layers_per_block", [](auto& c) -> auto& { return c.encoder.layers_per_block; });
      whole("growth_rate", [](auto& c) -> auto& { return c.encoder.growth_rate; });
      whole("input_size", [](auto& c) -> auto& { return c.encoder.input_size; });
      whole("stem_channels", [](auto& c) -> auto& { return c.encoder.stem_channels; });
      whole("frozen_blocks", [](auto& c) -> auto& { return c.encoder.frozen_blocks; });
      whole("hidden_size", [](auto& c) -> auto& { return c.decoder.hidden_size; });
      whole("embedding_size", [](auto& c) -> auto& { return c.decoder.embedding_size; });
      flag("gate_bias", [](auto& c) -> auto& { return c.decoder.gate_bias; });
      flag("val_cider", [](auto& c) -> auto& { return c.val_cider; });
      return m;
    }();
    return f;
  }
};

}  // namespace cxrgen
