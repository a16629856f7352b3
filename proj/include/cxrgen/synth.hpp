#pragma once

// Synthetic chest-film-like images with findings drawn as geometric
// primitives, paired with template reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/image.hpp"
#include "cxrgen/random.hpp"
#include "cxrgen/text.hpp"

namespace cxrgen {

struct FindingTemplate {
  std::string label;
  std::string sentence;
};

// Catalog order is also the order sentences appear in a rendered report.
inline const std::vector<FindingTemplate>& finding_catalog() {
  static const std::vector<FindingTemplate> catalog{
      {"effusion", "there is a pleural effusion on the right side ."},
      {"enlarged_heart", "the heart shadow is enlarged ."},
      {"increased_markings", "increased lung markings are seen in both lungs ."},
      {"nodule", "a small nodule is seen in the left upper lung ."},
  };
  return catalog;
}

inline const std::string& no_abnormality_sentence() {
  static const std::string s = "the heart and lungs show no obvious abnormalities .";
  return s;
}

inline std::size_t finding_rank(const std::string& label) {
  const auto& cat = finding_catalog();
  for (std::size_t i = 0; i < cat.size(); ++i)
    if (cat[i].label == label) return i;
  throw std::invalid_argument("unknown finding label: " + label);
}

inline std::vector<std::string> canonical_findings(std::vector<std::string> findings) {
  std::sort(findings.begin(), findings.end(),
            [](const auto& a, const auto& b) { return finding_rank(a) < finding_rank(b); });
  findings.erase(std::unique(findings.begin(), findings.end()), findings.end());
  return findings;
}

inline std::string render_report(const std::vector<std::string>& findings) {
  if (findings.empty()) return no_abnormality_sentence();
  std::string out;
  for (const auto& label : canonical_findings(findings)) {
    if (!out.empty()) out.push_back(' ');
    out += finding_catalog()[finding_rank(label)].sentence;
  }
  return out;
}

namespace detail {
inline bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}
}  // namespace detail

// Template inversion: a finding is present iff its full sentence occurs as a
// contiguous token run. Result is in catalog order.
inline std::vector<std::string> invert_report(const std::string& report) {
  const auto tokens = segment(report);
  std::vector<std::string> found;
  for (const auto& f : finding_catalog()) {
    if (detail::contains_run(tokens, segment(f.sentence))) found.push_back(f.label);
  }
  return found;
}

struct SynthConfig {
  std::size_t n_samples = 250;
  std::vector<std::string> finding_set{"effusion", "enlarged_heart", "increased_markings"};
  std::size_t image_size = 64;
  double noise_level = 0.04;
};

struct SynthSample {
  std::string id;
  GrayImage image;
  std::string report;
  std::vector<std::string> findings;
};

namespace detail {

class Canvas {
 public:
  explicit Canvas(std::size_t size) : size_(size), v_(size * size, 0.0) {}

  // f(u, v) -> optional override; u, v are pixel-center coordinates in [0, 1].
  template <typename F>
  void paint(F&& f) {
    for (std::size_t y = 0; y < size_; ++y)
      for (std::size_t x = 0; x < size_; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size_);
        const double w = (static_cast<double>(y) + 0.5) / static_cast<double>(size_);
        f(u, w, v_[y * size_ + x]);
      }
  }

  void ellipse(double cx, double cy, double rx, double ry, double value) {
    paint([&](double u, double w, double& px) {
      const double du = (u - cx) / rx, dw = (w - cy) / ry;
      if (du * du + dw * dw <= 1.0) px = value;
    });
  }

  static bool inside(double u, double w, double cx, double cy, double rx, double ry) {
    const double du = (u - cx) / rx, dw = (w - cy) / ry;
    return du * du + dw * dw <= 1.0;
  }

  GrayImage to_image(Rng& rng, double noise, double gain) const {
    GrayImage img(size_, size_);
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const double val = std::clamp(v_[i] * gain + noise * rng.normal(), 0.0, 1.0);
      img.pixels[i] = to_u8(255.0 * val);
    }
    return img;
  }

 private:
  std::size_t size_;
  std::vector<double> v_;
};

inline GrayImage draw_film(const std::vector<std::string>& findings, std::size_t size, double noise, Rng& rng) {
  auto has = [&](const char* label) { return std::find(findings.begin(), findings.end(), label) != findings.end(); };
  auto jitter = [&] { return rng.uniform(-0.02, 0.02); };

  Canvas c(size);
  c.paint([](double, double, double& px) { px = 0.08; });
  c.ellipse(0.5 + jitter(), 0.55 + jitter(), 0.42, 0.47, 0.5);  // body
  const double rlx = 0.31 + jitter(), rly = 0.45 + jitter();    // patient's right lung (image left)
  const double llx = 0.69 + jitter(), lly = 0.45 + jitter();
  const double lrx = 0.13, lry = 0.27;
  c.ellipse(rlx, rly, lrx, lry, 0.2);
  c.ellipse(llx, lly, lrx, lry, 0.2);
  c.paint([](double u, double, double& px) {
    if (u > 0.47 && u < 0.53) px = std::max(px, 0.62);  // spine
  });
  if (has("increased_markings")) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    c.paint([&](double u, double w, double& px) {
      if (!Canvas::inside(u, w, rlx, rly, lrx, lry) && !Canvas::inside(u, w, llx, lly, lrx, lry)) return;
      // Streaks radiating outward and downward from the hila.
      const double s = std::sin(2.0 * std::numbers::pi * 7.0 * (0.8 * std::abs(u - 0.5) + 0.6 * w) + phase);
      px += 0.3 * std::max(0.0, s);
    });
  }
  const bool big_heart = has("enlarged_heart");
  c.ellipse(0.55 + jitter(), 0.63 + jitter(), big_heart ? 0.2 : 0.11, big_heart ? 0.15 : 0.09, 0.72);
  if (has("effusion")) {
    const double ex = rlx + jitter(), ey = rly + 0.2 + jitter();
    c.paint([&](double u, double w, double& px) {
      if (Canvas::inside(u, w, ex, ey, 0.14, 0.08) && Canvas::inside(u, w, rlx, rly, lrx * 1.15, lry * 1.1)) px = 0.75;
    });
  }
  if (has("nodule")) c.ellipse(llx + 0.02 + jitter(), lly - 0.12 + jitter(), 0.035, 0.035, 0.82);
  const double gain = rng.uniform(0.9, 1.1);
  return c.to_image(rng, noise, gain);
}

}  // namespace detail

inline std::string sample_id(std::size_t i) {
  std::string digits = std::to_string(i);
  return "s" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

// Each sample draws 0, 1 or 2 findings (uniform over the count, then a
// uniform subset) and is fully determined by (config, seed, index).
inline std::vector<SynthSample> synth_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_samples == 0) throw std::invalid_argument("synth_dataset: n_samples must be at least 1");
  if (cfg.finding_set.empty()) throw std::invalid_argument("synth_dataset: finding_set is empty");
  if (cfg.image_size < 8) throw std::invalid_argument("synth_dataset: image_size must be at least 8");
  for (const auto& f : cfg.finding_set) finding_rank(f);
  const auto pool = canonical_findings(cfg.finding_set);

  std::vector<SynthSample> out;
  out.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    Rng rng(derive_seed(seed, i));
    const std::size_t k = std::min<std::size_t>(rng.index(3), pool.size());
    auto shuffled = pool;
    rng.shuffle(shuffled);
    std::vector<std::string> findings(shuffled.begin(), shuffled.begin() + static_cast<long>(k));
    findings = canonical_findings(findings);
    SynthSample s;
    s.id = sample_id(i);
    s.image = detail::draw_film(findings, cfg.image_size, cfg.noise_level, rng);
    s.report = render_report(findings);
    s.findings = std::move(findings);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cxrgen
