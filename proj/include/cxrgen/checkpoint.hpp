#pragma once

// Versioned binary checkpoint. Layout is documented in docs/checkpoint-format.md.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const TensorRecord&) const = default;
};

struct EpochMetrics {
  std::uint64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_cider = 0.0;

  bool operator==(const EpochMetrics&) const = default;
};

struct OptimizerState {
  std::uint64_t steps = 0;
  std::vector<TensorRecord> first_moments;
  std::vector<TensorRecord> second_moments;

  bool operator==(const OptimizerState&) const = default;
};

struct Checkpoint {
  static constexpr std::array<char, 8> kMagic{'C', 'X', 'R', 'G', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  std::string config;  // key=value text
  std::vector<std::string> vocabulary;
  std::uint64_t epoch = 0;  // epochs completed
  std::uint64_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochMetrics> history;
  std::vector<TensorRecord> tensors;
  OptimizerState encoder_optimizer;
  OptimizerState decoder_optimizer;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u64(s.size());
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  void tensor(const TensorRecord& t) {
    str(t.name);
    u64(t.shape.size());
    for (auto d : t.shape) u64(d);
    for (double v : t.data) f64(v);
  }
  void tensors(const std::vector<TensorRecord>& ts) {
    u64(ts.size());
    for (const auto& t : ts) tensor(t);
  }
  const std::string& bytes() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const auto n = count(1);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  TensorRecord tensor() {
    TensorRecord t;
    t.name = str();
    const auto rank = count(8);
    for (std::uint64_t i = 0; i < rank; ++i) t.shape.push_back(u64());
    const auto n = shape_numel(t.shape);
    need(n * 8);
    t.data.resize(n);
    for (auto& v : t.data) v = f64();
    return t;
  }
  std::vector<TensorRecord> tensors() {
    std::vector<TensorRecord> out(count(8));
    for (auto& t : out) t = tensor();
    return out;
  }
  std::size_t position() const { return pos_; }
  // Reads a u64 element count and checks the remaining bytes could hold it.
  std::size_t count(std::size_t min_bytes_each) {
    const auto n = u64();
    if (n > (b_.size() - pos_) / std::max<std::size_t>(1, min_bytes_each)) throw std::runtime_error("checkpoint: truncated");
    return n;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline void write_optimizer(ByteWriter& w, const OptimizerState& s) {
  w.u64(s.steps);
  w.tensors(s.first_moments);
  w.tensors(s.second_moments);
}

inline OptimizerState read_optimizer(ByteReader& r) {
  OptimizerState s;
  s.steps = r.u64();
  s.first_moments = r.tensors();
  s.second_moments = r.tensors();
  return s;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(Checkpoint::kMagic.data(), Checkpoint::kMagic.size());
  w.u32(Checkpoint::kVersion);
  w.str(c.config);
  w.u64(c.vocabulary.size());
  for (const auto& t : c.vocabulary) w.str(t);
  w.u64(c.epoch);
  w.u64(c.best_epoch);
  w.f64(c.best_val_loss);
  w.u64(c.history.size());
  for (const auto& m : c.history) {
    w.u64(m.epoch);
    w.f64(m.train_loss);
    w.f64(m.val_loss);
    w.f64(m.val_cider);
  }
  w.tensors(c.tensors);
  detail::write_optimizer(w, c.encoder_optimizer);
  detail::write_optimizer(w, c.decoder_optimizer);
  std::string out = w.bytes();
  detail::ByteWriter tail;
  tail.u64(detail::fnv1a(out));
  return out + tail.bytes();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 + 4 + 8) throw std::runtime_error("checkpoint: truncated");
  const std::string body = bytes.substr(0, bytes.size() - 8);
  const std::string trailer = bytes.substr(bytes.size() - 8);
  if (detail::ByteReader(trailer).u64() != detail::fnv1a(body)) throw std::runtime_error("checkpoint: checksum mismatch");
  detail::ByteReader r(body);
  if (r.raw(8) != std::string(Checkpoint::kMagic.data(), 8)) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.config = r.str();
  c.vocabulary.resize(r.count(8));
  for (auto& t : c.vocabulary) t = r.str();
  c.epoch = r.u64();
  c.best_epoch = r.u64();
  c.best_val_loss = r.f64();
  c.history.resize(r.count(32));
  for (auto& m : c.history) {
    m.epoch = r.u64();
    m.train_loss = r.f64();
    m.val_loss = r.f64();
    m.val_cider = r.f64();
  }
  c.tensors = r.tensors();
  c.encoder_optimizer = detail::read_optimizer(r);
  c.decoder_optimizer = detail::read_optimizer(r);
  if (r.position() != body.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

// Writes to a sibling temporary, flushes it to disk, then renames over the
// target so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + tmp.string());
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size() && std::fflush(f) == 0 &&
                  ::fsync(fileno(f)) == 0;
  std::fclose(f);
  if (!ok) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace cxrgen
