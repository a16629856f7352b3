#pragma once

// Word-aligned attention heatmaps. One overlay PNG per emitted word plus a
// JSON sidecar with the raw weights.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxrgen/beam_search.hpp"
#include "cxrgen/image.hpp"
#include "cxrgen/model.hpp"

namespace cxrgen {

enum class DecodeMode { greedy, beam };

struct AttentionTrace {
  std::vector<std::string> words;  // includes <end> when it was emitted
  std::vector<std::vector<double>> alphas;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline AttentionTrace trace_from_decoded(const Decoded& d, const Vocabulary& vocab, std::size_t rows,
                                         std::size_t cols) {
  AttentionTrace t;
  t.rows = rows;
  t.cols = cols;
  // An <end> appended at max_len has no attention step behind it.
  for (std::size_t i = 0; i < d.alphas.size(); ++i) {
    if (d.alphas[i].size() != rows * cols) throw std::invalid_argument("attention trace: alpha size does not match grid");
    t.words.push_back(vocab.token(d.report.indices.at(i + 1)));
    t.alphas.push_back(d.alphas[i]);
  }
  return t;
}

inline AttentionTrace capture_trace(const Decoder& decoder, const FeatureMap& features, const Vocabulary& vocab,
                                    DecodeMode mode, const BeamConfig& beam) {
  NoGradGuard no_grad;
  Decoded d;
  if (mode == DecodeMode::greedy) {
    d = decoder.generate_greedy(features, beam.max_len);
  } else {
    auto all = beam_search(decoder, features, beam);
    if (all.empty()) throw std::runtime_error("beam search returned no hypotheses");
    d = std::move(all.front());
  }
  return trace_from_decoded(d, vocab, features.grid_rows, features.grid_cols);
}

inline AttentionTrace capture_trace(Model& model, const Tensor& image, DecodeMode mode, const BeamConfig& beam) {
  NoGradGuard no_grad;
  return capture_trace(model.decoder(), model.features(image), model.vocabulary(), mode, beam);
}

// Upsampled to width x height and divided by its own maximum; an all-zero
// map stays zero.
inline std::vector<double> heatmap(const std::vector<double>& alpha, std::size_t rows, std::size_t cols,
                                   std::size_t width, std::size_t height) {
  auto up = upsample_grid(alpha, rows, cols, width, height);
  const double mx = up.empty() ? 0.0 : *std::max_element(up.begin(), up.end());
  for (auto& v : up) v = mx > 0.0 ? v / mx : 0.0;
  return up;
}

// Half base image, half red heat.
inline RgbImage overlay(const GrayImage& base, const std::vector<double>& heat) {
  if (heat.size() != base.pixels.size()) throw std::invalid_argument("overlay: heatmap size does not match image");
  RgbImage out{base.width, base.height, std::vector<std::uint8_t>(base.pixels.size() * 3)};
  for (std::size_t i = 0; i < base.pixels.size(); ++i) {
    const double g = 0.5 * base.pixels[i];
    out.pixels[3 * i] = to_u8(g + 0.5 * 255.0 * heat[i]);
    out.pixels[3 * i + 1] = to_u8(g);
    out.pixels[3 * i + 2] = to_u8(g);
  }
  return out;
}

// NNN_<word>.png; anything but ASCII letters and digits becomes '_'.
inline std::string heatmap_file_name(std::size_t index, const std::string& word) {
  std::string safe;
  for (unsigned char ch : word) safe.push_back((std::isalnum(ch) && ch < 0x80) ? static_cast<char>(ch) : '_');
  char prefix[16];
  std::snprintf(prefix, sizeof prefix, "%03zu_", index);
  return prefix + safe + ".png";
}

// Writes one overlay per word and attention.json; returns the PNG paths.
inline std::vector<std::filesystem::path> render_heatmaps(const AttentionTrace& trace, const GrayImage& base,
                                                          const std::filesystem::path& out_dir) {
  if (base.empty()) throw std::invalid_argument("render_heatmaps: base image is empty");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("cannot create output directory " + out_dir.string());
  }
  std::vector<std::filesystem::path> files;
  nlohmann::json side{{"grid", {trace.rows, trace.cols}}, {"image", {base.width, base.height}}};
  for (std::size_t i = 0; i < trace.words.size(); ++i) {
    const auto heat = heatmap(trace.alphas[i], trace.rows, trace.cols, base.width, base.height);
    files.push_back(out_dir / heatmap_file_name(i, trace.words[i]));
    write_png(files.back(), overlay(base, heat));
    side["steps"].push_back({{"word", trace.words[i]}, {"file", files.back().filename().string()}, {"alpha", trace.alphas[i]}});
  }
  std::ofstream out(out_dir / "attention.json");
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "attention.json").string());
  out << side.dump(2) << '\n';
  return files;
}

}  // namespace cxrgen
