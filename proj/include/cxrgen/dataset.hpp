#pragma once

// On-disk dataset layout: a directory of PNG files plus reports.jsonl with
// one {id, image_file, report, findings, split} object per line.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxrgen/image.hpp"
#include "cxrgen/random.hpp"
#include "cxrgen/synth.hpp"

namespace cxrgen {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + s);
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Seeded shuffle, then contiguous [train | val | test]; val and test sizes are
// floor(n * ratio) and train takes the remainder.
inline SplitIndices split_dataset(std::size_t n, const SplitRatios& ratios, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("split_dataset: empty dataset");
  for (double r : {ratios.train, ratios.val, ratios.test}) {
    if (!(r >= 0.0)) throw std::invalid_argument("split_dataset: ratios must be non-negative");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios must sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  auto count = [n](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
  const std::size_t n_val = count(ratios.val), n_test = count(ratios.test);
  const std::size_t n_train = n - n_val - n_test;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  s.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
  return s;
}

struct DatasetRecord {
  std::string id;
  std::string image_file;  // relative to the dataset directory
  std::string report;
  std::vector<std::string> findings;
  Split split = Split::train;
};

inline void to_json(nlohmann::json& j, const DatasetRecord& r) {
  j = {{"id", r.id}, {"image_file", r.image_file}, {"report", r.report}, {"findings", r.findings},
       {"split", split_name(r.split)}};
}

inline void from_json(const nlohmann::json& j, DatasetRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.image_file = j.at("image_file").get<std::string>();
  r.report = j.at("report").get<std::string>();
  r.findings = j.value("findings", std::vector<std::string>{});
  r.split = parse_split(j.value("split", std::string("train")));
}

struct Dataset {
  std::filesystem::path root;
  std::vector<DatasetRecord> records;

  std::vector<const DatasetRecord*> split(Split s) const {
    std::vector<const DatasetRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }

  GrayImage load_image(const DatasetRecord& r) const { return read_png(root / r.image_file); }
};

inline std::vector<std::string> read_jsonl_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  }
  return lines;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.root = dir;
  for (const auto& line : read_jsonl_lines(dir / "reports.jsonl")) {
    ds.records.push_back(nlohmann::json::parse(line).get<DatasetRecord>());
  }
  if (ds.records.empty()) throw std::runtime_error("dataset at " + dir.string() + " has no records");
  return ds;
}

// Writes images and reports.jsonl; splits assigned by split_dataset.
inline Dataset write_dataset(const std::filesystem::path& dir, const std::vector<SynthSample>& samples,
                             const SplitRatios& ratios, std::uint64_t split_seed) {
  std::filesystem::create_directories(dir / "images");
  const auto parts = split_dataset(samples.size(), ratios, split_seed);
  std::vector<Split> assignment(samples.size(), Split::train);
  for (auto i : parts.val) assignment[i] = Split::val;
  for (auto i : parts.test) assignment[i] = Split::test;

  Dataset ds;
  ds.root = dir;
  std::ofstream out(dir / "reports.jsonl");
  if (!out) throw std::runtime_error("cannot write " + (dir / "reports.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    DatasetRecord r{s.id, "images/" + s.id + ".png", s.report, s.findings, assignment[i]};
    write_png(dir / r.image_file, s.image);
    out << nlohmann::json(r).dump() << '\n';
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace cxrgen
