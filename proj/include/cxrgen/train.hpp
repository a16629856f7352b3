#pragma once

// Teacher-forced training with two Adam instances (encoder, decoder),
// per-epoch validation, checkpoints and a metrics CSV.
//
// Every source of randomness is derived from the config seed:
//   stream 1      model initialization
//   stream 2      pretraining corpus
//   stream 3      pretraining head
//   500 + epoch   pretraining sample order
//   1000 + epoch  sample order within an epoch
// so a run restored from a checkpoint continues exactly as it would have.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/cider.hpp"
#include "cxrgen/dataset.hpp"
#include "cxrgen/model.hpp"
#include "cxrgen/optim.hpp"
#include "cxrgen/synth.hpp"

namespace cxrgen {

struct Example {
  std::string id;
  Tensor image;  // preprocessed [1 x S x S]
  GrayImage raw;
  std::string report;
  std::vector<std::string> findings;
};

struct TrainingData {
  std::vector<Example> train, val, test;

  std::vector<Example>& split(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
  const std::vector<Example>& split(Split s) const { return s == Split::train ? train : s == Split::val ? val : test; }
};

inline Example make_example(std::string id, GrayImage raw, std::string report, std::vector<std::string> findings,
                            std::size_t input_size) {
  Example e{std::move(id), image_to_tensor(preprocess(raw, input_size)), std::move(raw), std::move(report),
            std::move(findings)};
  return e;
}

inline TrainingData load_training_data(const Dataset& ds, std::size_t input_size) {
  TrainingData d;
  for (const auto& r : ds.records) {
    d.split(r.split).push_back(make_example(r.id, ds.load_image(r), r.report, r.findings, input_size));
  }
  return d;
}

inline TrainingData make_training_data(const std::vector<SynthSample>& samples, const SplitIndices& parts,
                                       std::size_t input_size) {
  TrainingData d;
  auto fill = [&](const std::vector<std::size_t>& idx, std::vector<Example>& out) {
    for (auto i : idx) {
      const auto& s = samples.at(i);
      out.push_back(make_example(s.id, s.image, s.report, s.findings, input_size));
    }
  };
  fill(parts.train, d.train);
  fill(parts.val, d.val);
  fill(parts.test, d.test);
  return d;
}

inline Vocabulary build_vocabulary(const std::vector<Example>& train, std::size_t min_count) {
  if (train.empty()) throw std::invalid_argument("training split is empty");
  std::vector<std::vector<std::string>> corpus;
  for (const auto& e : train) corpus.push_back(segment(e.report));
  return Vocabulary::build(corpus, min_count);
}

// Trains the encoder and a linear head over V_gav to predict every catalog
// finding on a separate synthetic corpus, then drops the head.
inline void pretrain_encoder(Encoder& enc, const TrainConfig& cfg, std::ostream* out = nullptr) {
  SynthConfig sc;
  sc.n_samples = cfg.pretrain_samples;
  sc.finding_set.clear();
  for (const auto& f : finding_catalog()) sc.finding_set.push_back(f.label);
  const auto samples = synth_dataset(sc, derive_seed(cfg.seed, 2));
  const std::size_t k = sc.finding_set.size(), c = enc.output_channels();

  std::vector<Tensor> images;
  std::vector<Tensor> labels;
  for (const auto& s : samples) {
    images.push_back(image_to_tensor(preprocess(s.image, cfg.encoder.input_size)));
    Tensor y(Shape{k}, 0.0);
    for (const auto& f : s.findings) y.mutable_data()[finding_rank(f)] = 1.0;
    labels.push_back(y);
  }
  enc.calibrate({images.begin(), images.begin() + static_cast<long>(std::min(images.size(), cfg.calibration_images))});
  enc.set_trainable(0);

  Rng rng(derive_seed(cfg.seed, 3));
  Tensor W = uniform_fan_in(Shape{k, c}, c, rng);
  Tensor b(Shape{k}, 0.0, true);
  auto params = enc.trainable_parameters();
  params.push_back(W);
  params.push_back(b);
  Adam opt(params, {cfg.lr_pretrain, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  const Tensor ones(Shape{k}, 1.0);

  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(cfg.seed, 500 + epoch));
    shuffle.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t j = start; j < end; ++j) {
        auto fm = enc.forward(images[order[j]], NormUpdate::ema);
        Tensor p = sigmoid(add(matmul(W, fm.V_gav), b));
        const Tensor& y = labels[order[j]];
        // binary cross-entropy summed over findings
        Tensor ll = add(mul(y, log(p, 1e-12)), mul(sub(ones, y), log(sub(ones, p), 1e-12)));
        Tensor loss = scale(sum(ll), -1.0);
        total += loss.item();
        backward(scale(loss, 1.0 / static_cast<double>(end - start)));
      }
      if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
      opt.step();
      opt.zero_grad();
    }
    if (out) *out << "pretrain epoch " << epoch + 1 << " bce " << total / static_cast<double>(samples.size()) << '\n';
  }
  enc.set_trainable(cfg.encoder.frozen_blocks);
}

class Trainer {
 public:
  // Fresh run: vocabulary from the training split, calibration, optional
  // pretraining, then freezing.
  Trainer(const TrainConfig& cfg, const TrainingData& data, std::ostream* log = nullptr)
      : cfg_(validated(cfg)),
        data_(data),
        log_(log),
        model_(cfg_.encoder, cfg_.decoder, build_vocabulary(data.train, cfg_.min_count), derive_seed(cfg_.seed, 1)) {
    if (cfg_.pretrain_epochs > 0) {
      pretrain_encoder(model_.encoder(), cfg_, log_);
    } else {
      std::vector<Tensor> imgs;
      for (std::size_t i = 0; i < std::min(data.train.size(), cfg_.calibration_images); ++i) {
        imgs.push_back(data.train[i].image);
      }
      model_.encoder().calibrate(imgs);
    }
    model_.encoder().set_trainable(cfg_.encoder.frozen_blocks);
    init();
  }

  // Continues from a checkpoint. The training split must produce the same
  // vocabulary that the checkpoint was trained with.
  Trainer(const Checkpoint& ckpt, const TrainingData& data, std::ostream* log = nullptr)
      : cfg_(TrainConfig::parse(ckpt.config)),
        data_(data),
        log_(log),
        model_(cfg_.encoder, cfg_.decoder, Vocabulary::from_tokens(ckpt.vocabulary), 0) {
    model_.check_vocabulary(build_vocabulary(data.train, cfg_.min_count));
    model_.import_tensors(ckpt.tensors);
    model_.encoder().set_trainable(cfg_.encoder.frozen_blocks);
    init();
    restore(enc_opt_, enc_names_, ckpt.encoder_optimizer);
    restore(dec_opt_, dec_names_, ckpt.decoder_optimizer);
    epoch_ = ckpt.epoch;
    best_epoch_ = ckpt.best_epoch;
    best_val_loss_ = ckpt.best_val_loss;
    history_ = ckpt.history;
  }

  const TrainConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t best_epoch() const { return best_epoch_; }
  const std::vector<EpochMetrics>& history() const { return history_; }

  // Mean teacher-forced loss without updating anything.
  double mean_loss(const std::vector<Example>& xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    NoGradGuard no_grad;
    double total = 0.0;
    for (const auto& e : xs) {
      auto fm = model_.encoder().forward(e.image, NormUpdate::none);
      total += model_.decoder().teacher_forced_rollout(fm, target(e)).loss.item();
    }
    return total / static_cast<double>(xs.size());
  }

  // Greedy decoding scored against the split's own references.
  double greedy_cider(const std::vector<Example>& xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<Sentence> cands;
    std::vector<std::vector<Sentence>> refs;
    for (const auto& e : xs) {
      NoGradGuard no_grad;
      auto d = model_.decoder().generate_greedy(model_.features(e.image), cfg_.max_len);
      cands.push_back(decode_tokens(d.report.indices, model_.vocabulary()));
      refs.push_back({segment(e.report)});
    }
    return corpus_cider(cands, refs, corpus_stats(refs)).mean;
  }

  EpochMetrics run_epoch() {
    const auto& train = data_.train;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg_.seed, 1000 + epoch_));
    rng.shuffle(order);

    auto params = enc_opt_->params();
    params.insert(params.end(), dec_opt_->params().begin(), dec_opt_->params().end());
    double total = 0.0;
    LossStats stats;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      for (std::size_t j = start; j < end; ++j) {
        const Example& e = train[order[j]];
        auto fm = model_.encoder().forward(e.image, NormUpdate::ema);
        auto r = model_.decoder().teacher_forced_rollout(fm, target(e), &stats);
        total += r.loss.item();
        backward(scale(r.loss, 1.0 / static_cast<double>(end - start)));
      }
      if (cfg_.clip_norm > 0) clip_grad_norm(params, cfg_.clip_norm);
      for (Adam* opt : {enc_opt_.get(), dec_opt_.get()}) {
        auto report = opt->step();
        if (log_ && !report.rejected.empty()) {
          *log_ << "warning: skipped " << report.rejected.size() << " tensors with non-finite gradients\n";
        }
        opt->zero_grad();
      }
    }
    if (log_ && stats.clamped > 0) *log_ << "warning: " << stats.clamped << " target probabilities hit the log floor\n";

    EpochMetrics m;
    m.train_loss = total / static_cast<double>(train.size());
    if (!std::isfinite(m.train_loss)) {
      throw std::runtime_error("training loss is not finite at epoch " + std::to_string(epoch_ + 1));
    }
    m.epoch = ++epoch_;
    m.val_loss = mean_loss(data_.val);
    m.val_cider = cfg_.val_cider ? greedy_cider(data_.val) : std::numeric_limits<double>::quiet_NaN();
    const double selection = data_.val.empty() ? m.train_loss : m.val_loss;
    if (selection < best_val_loss_) {  // strict, so ties keep the earlier epoch
      best_val_loss_ = selection;
      best_epoch_ = m.epoch;
    }
    history_.push_back(m);
    return m;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config = cfg_.to_text();
    c.vocabulary = model_.vocabulary().tokens();
    c.epoch = epoch_;
    c.best_epoch = best_epoch_;
    c.best_val_loss = best_val_loss_;
    c.history = history_;
    c.tensors = model_.export_tensors();
    c.encoder_optimizer = save(*enc_opt_, enc_names_);
    c.decoder_optimizer = save(*dec_opt_, dec_names_);
    return c;
  }

  const TokenizedReport& target(const Example& e) {
    auto it = targets_.find(e.id);
    if (it == targets_.end()) it = targets_.emplace(e.id, encode(segment(e.report), model_.vocabulary())).first;
    return it->second;
  }

 private:
  static TrainConfig validated(TrainConfig c) {
    c.validate();
    return c;
  }

  void init() {
    std::vector<Tensor> enc_params, dec_params;
    for (const auto& nt : model_.encoder().tensors()) {
      if (!nt.is_buffer && nt.tensor.requires_grad()) {
        enc_params.push_back(nt.tensor);
        enc_names_.push_back(nt.name);
      }
    }
    for (const auto& nt : model_.decoder().tensors()) {
      dec_params.push_back(nt.tensor);
      dec_names_.push_back(nt.name);
    }
    enc_opt_ = std::make_unique<Adam>(enc_params, AdamConfig{cfg_.lr_encoder, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps});
    dec_opt_ = std::make_unique<Adam>(dec_params, AdamConfig{cfg_.lr_decoder, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps});
  }

  static OptimizerState save(const Adam& opt, const std::vector<std::string>& names) {
    OptimizerState s;
    s.steps = opt.steps();
    for (std::size_t k = 0; k < names.size(); ++k) {
      s.first_moments.push_back({names[k], opt.params()[k].shape(), opt.first_moments()[k]});
      s.second_moments.push_back({names[k], opt.params()[k].shape(), opt.second_moments()[k]});
    }
    return s;
  }

  static void restore(std::unique_ptr<Adam>& opt, const std::vector<std::string>& names, const OptimizerState& s) {
    if (s.first_moments.size() != names.size() || s.second_moments.size() != names.size()) {
      throw std::runtime_error("checkpoint optimizer state does not match the trainable parameters");
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (s.first_moments[k].name != names[k] || s.second_moments[k].name != names[k] ||
          s.first_moments[k].data.size() != opt->params()[k].size() ||
          s.second_moments[k].data.size() != opt->params()[k].size()) {
        throw std::runtime_error("checkpoint optimizer state does not match parameter " + names[k]);
      }
      opt->first_moments()[k] = s.first_moments[k].data;
      opt->second_moments()[k] = s.second_moments[k].data;
    }
    opt->set_steps(s.steps);
  }

  TrainConfig cfg_;
  const TrainingData& data_;
  std::ostream* log_;
  Model model_;
  std::unique_ptr<Adam> enc_opt_, dec_opt_;
  std::vector<std::string> enc_names_, dec_names_;
  std::map<std::string, TokenizedReport> targets_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  double best_val_loss_ = std::numeric_limits<double>::infinity();
  std::vector<EpochMetrics> history_;
};

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_cider\n" << std::setprecision(17);
  for (const auto& m : history) out << m.epoch << ',' << m.train_loss << ',' << m.val_loss << ',' << m.val_cider << '\n';
}

inline std::string epoch_checkpoint_name(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return s.str();
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::optional<std::filesystem::path> resume;
  std::size_t stop_after_epoch = 0;  // 0 runs to config.epochs
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  Checkpoint last;
  Checkpoint best;
};

// Writes out_dir/epoch_NNN.ckpt every epoch, plus last.ckpt, best.ckpt,
// vocab.json and metrics.csv. A non-finite epoch loss stops the run and
// leaves the previous checkpoints in place.
inline TrainResult train(const TrainConfig& cfg, const TrainingData& data, const TrainOptions& opt = {}) {
  std::unique_ptr<Trainer> t;
  if (opt.resume) t = std::make_unique<Trainer>(load_checkpoint(*opt.resume), data, opt.log);
  else t = std::make_unique<Trainer>(cfg, data, opt.log);
  const std::size_t epochs = opt.resume ? t->config().epochs : cfg.epochs;
  const std::size_t stop = opt.stop_after_epoch ? std::min(opt.stop_after_epoch, epochs) : epochs;

  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    t->model().vocabulary().save(opt.out_dir / "vocab.json");
  }
  TrainResult result;
  if (opt.resume && t->best_epoch() > 0) {
    const auto best_path = opt.resume->parent_path() / epoch_checkpoint_name(t->best_epoch());
    if (std::filesystem::exists(best_path)) result.best = load_checkpoint(best_path);
  }
  while (t->epoch() < stop) {
    const auto m = t->run_epoch();
    if (opt.log) {
      *opt.log << "epoch " << m.epoch << " train_loss " << m.train_loss << " val_loss " << m.val_loss << " val_cider "
               << m.val_cider << '\n';
    }
    const auto ckpt = t->checkpoint();
    const bool improved = t->best_epoch() == m.epoch;
    if (improved) result.best = ckpt;
    if (!opt.out_dir.empty()) {
      save_checkpoint(opt.out_dir / epoch_checkpoint_name(m.epoch), ckpt);
      save_checkpoint(opt.out_dir / "last.ckpt", ckpt);
      if (improved) save_checkpoint(opt.out_dir / "best.ckpt", ckpt);
      write_metrics_csv(opt.out_dir / "metrics.csv", t->history());
    }
    result.last = ckpt;
  }
  result.history = t->history();
  result.best_epoch = t->best_epoch();
  return result;
}

}  // namespace cxrgen
