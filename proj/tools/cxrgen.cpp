// cxrgen command line: synth-data, train, generate, eval, viz, serve.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cxrgen/attention_viz.hpp"
#include "cxrgen/evaluate.hpp"
#include "cxrgen/review_server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cxrgen;

namespace {

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, sep);)
    if (!part.empty()) out.push_back(part);
  return out;
}

SplitRatios parse_ratios(const std::string& s) {
  const auto parts = split_list(s, ',');
  if (parts.size() != 3) throw std::invalid_argument("--split expects three comma-separated ratios");
  return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  const auto lines = read_jsonl_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(json::parse(lines[i]));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << j.dump(2) << '\n';
}

json beams_json(const std::vector<Decoded>& beams, const Vocabulary& vocab) {
  json out = json::array();
  for (const auto& d : beams) {
    out.push_back({{"text", decode(d.report.indices, vocab)}, {"log_prob", d.log_prob}, {"finished", d.finished}});
  }
  return out;
}

struct BeamArgs {
  std::size_t width = 3;
  std::size_t max_len = 0;  // 0: take it from the checkpoint config
  std::size_t n_best = 3;
  bool normalize = false;

  void add(CLI::App* app) {
    app->add_option("--beam-width", width, "Beam width")->check(CLI::PositiveNumber);
    app->add_option("--max-len", max_len, "Maximum generated tokens (default from checkpoint)");
    app->add_option("--n-best", n_best, "Reports returned per image")->check(CLI::PositiveNumber);
    app->add_flag("--length-normalize", normalize, "Rank beams by mean log-probability");
  }
  BeamConfig config(const Checkpoint& ckpt) const {
    BeamConfig b;
    b.beam_width = width;
    b.max_len = max_len ? max_len : TrainConfig::parse(ckpt.config).max_len;
    b.n_best = std::min(n_best, width);
    b.length_normalize = normalize;
    return b;
  }
};

int cmd_synth(const std::string& out, std::size_t n, std::uint64_t seed, std::uint64_t split_seed,
              std::size_t image_size, const std::string& findings, const std::string& split) {
  SynthConfig sc;
  sc.n_samples = n;
  sc.image_size = image_size;
  sc.finding_set = split_list(findings, ',');
  const auto ds = write_dataset(out, synth_dataset(sc, seed), parse_ratios(split), split_seed);
  std::map<std::string, std::size_t> counts;
  for (const auto& r : ds.records) ++counts[split_name(r.split)];
  std::cerr << "wrote " << ds.records.size() << " samples to " << out << " (train " << counts["train"] << ", val "
            << counts["val"] << ", test " << counts["test"] << ")\n";
  return 0;
}

TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : TrainConfig::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const std::string& data_dir, const std::string& config, const std::vector<std::string>& overrides,
              const std::string& out, const std::string& resume, std::size_t stop_after) {
  const auto ds = load_dataset(data_dir);
  TrainOptions opt;
  opt.out_dir = out;
  opt.log = &std::cerr;
  opt.stop_after_epoch = stop_after;
  TrainConfig cfg;
  if (!resume.empty()) {
    opt.resume = fs::path(resume);
    cfg = TrainConfig::parse(load_checkpoint(resume).config);
  } else {
    cfg = load_config(config, overrides);
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "config.cfg") << cfg.to_text();
  }
  const auto data = load_training_data(ds, cfg.encoder.input_size);
  const auto result = train(cfg, data, opt);
  json hist = json::array();
  for (const auto& m : result.history) {
    hist.push_back({{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"val_loss", m.val_loss}, {"val_cider", m.val_cider}});
  }
  std::cout << json{{"best_epoch", result.best_epoch}, {"history", hist}, {"out", out}}.dump(2) << '\n';
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& image, const std::string& data_dir,
                 const std::string& split, const BeamArgs& beam_args, const std::string& out_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  auto model = model_from_checkpoint(ckpt);
  const auto beam = beam_args.config(ckpt);
  std::vector<std::pair<std::string, fs::path>> inputs;
  if (!image.empty()) inputs.push_back({fs::path(image).stem().string(), image});
  if (!data_dir.empty()) {
    const auto ds = load_dataset(data_dir);
    for (const auto* r : ds.split(parse_split(split))) inputs.push_back({r->id, ds.root / r->image_file});
  }
  if (inputs.empty()) throw std::invalid_argument("generate needs --image or --data");
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw std::runtime_error("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  for (const auto& [id, path] : inputs) {
    const auto beams = model.generate(model.prepare_image(read_png(path)), beam);
    const auto list = beams_json(beams, model.vocabulary());
    out << json{{"id", id}, {"report", list.empty() ? "" : list[0]["text"]}, {"beams", list}}.dump() << '\n';
  }
  return 0;
}

// Candidate/reference JSONL: {"id", "report"}. References are restricted to
// the candidate ids, so document frequencies come from the scored set.
int cmd_eval_text(const std::string& candidates, const std::string& references, double scale,
                  const std::string& out_path) {
  std::map<std::string, std::string> refs;
  for (const auto& j : read_jsonl(references)) refs[j.at("id").get<std::string>()] = j.at("report").get<std::string>();
  std::vector<std::string> ids;
  std::vector<Sentence> cands;
  std::vector<std::vector<Sentence>> ref_sets;
  std::set<std::string> seen;
  for (const auto& j : read_jsonl(candidates)) {
    const auto id = j.at("id").get<std::string>();
    if (!seen.insert(id).second) throw std::invalid_argument("duplicate candidate id '" + id + "'");
    auto it = refs.find(id);
    if (it == refs.end()) throw std::invalid_argument("no reference for candidate '" + id + "'");
    ids.push_back(id);
    cands.push_back(segment(j.at("report").get<std::string>()));
    ref_sets.push_back({segment(it->second)});
  }
  const auto score = corpus_cider(cands, ref_sets, corpus_stats(ref_sets), 4, scale);
  json per = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) per.push_back({{"id", ids[i]}, {"score", score.per_image[i]}});
  emit({{"per_image", per}, {"mean", score.mean}, {"scale", score.scale}}, out_path);
  return 0;
}

int cmd_eval_model(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
                   const BeamArgs& beam_args, double scale, const std::string& out_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto cfg = TrainConfig::parse(ckpt.config);
  const auto data = load_training_data(load_dataset(data_dir), cfg.encoder.input_size);
  const auto& xs = data.split(parse_split(split));
  const auto r = evaluate(ckpt, Vocabulary::from_tokens(ckpt.vocabulary), xs, beam_args.config(ckpt), scale);
  json per = json::array();
  for (const auto& it : r.items) {
    per.push_back({{"id", it.id}, {"reference", it.reference}, {"beams", it.beams}, {"log_probs", it.log_probs},
                   {"scores", it.scores}, {"score", it.best}, {"findings", canonical_findings(it.true_findings)},
                   {"predicted_findings", it.predicted_findings}});
  }
  const auto majority = majority_report(data.train.empty() ? xs : data.train);
  double baseline = 0;
  for (double v : constant_report_scores(majority, xs)) baseline += scale * v;
  baseline /= static_cast<double>(xs.size());
  emit({{"per_image", per},
        {"mean", r.mean_best},
        {"mean_rank1", r.mean_rank1},
        {"finding_agreement", r.finding_agreement},
        {"histogram", r.histogram},
        {"majority_report", majority},
        {"majority_baseline", baseline},
        {"scale", r.scale}},
       out_path);
  return 0;
}

int cmd_viz(const std::string& ckpt_path, const std::string& image, const std::string& out, const std::string& mode,
            const BeamArgs& beam_args) {
  const auto ckpt = load_checkpoint(ckpt_path);
  auto model = model_from_checkpoint(ckpt);
  const auto raw = read_png(image);
  const auto input = preprocess(raw, model.encoder().config().input_size);
  const auto trace = capture_trace(model, image_to_tensor(input), mode == "beam" ? DecodeMode::beam : DecodeMode::greedy,
                                   beam_args.config(ckpt));
  const auto files = render_heatmaps(trace, input, out);
  std::vector<std::string> words = trace.words;
  std::cerr << "wrote " << files.size() << " heatmaps to " << out << '\n';
  std::cout << json{{"words", words}, {"out", out}}.dump() << '\n';
  return 0;
}

ReviewServer* g_server = nullptr;

int cmd_serve(const std::string& host, int port, const std::string& data_dir, const std::string& dataset,
              const std::string& ckpt_path, const BeamArgs& beam_args) {
  ReviewStore store(data_dir);
  SessionFactory factory;
  std::optional<Model> model;
  std::mutex model_mu;
  BeamConfig beam;
  if (!dataset.empty()) {
    auto sources = test_sources(load_dataset(dataset));
    ReportGenerator generate;
    if (!ckpt_path.empty()) {
      const auto ckpt = load_checkpoint(ckpt_path);
      model.emplace(model_from_checkpoint(ckpt));
      beam = beam_args.config(ckpt);
      generate = [&](const SessionSource& s) {
        std::lock_guard lock(model_mu);
        const auto beams = model->generate(model->prepare_image(read_png(s.image)), beam);
        return beams.empty() ? std::string() : decode(beams.front().report.indices, model->vocabulary());
      };
    }
    std::cerr << sources.size() << " test images available for sessions\n";
    factory = make_session_factory(std::move(sources), generate);
  }
  ReviewServer server(store, factory);
  const int bound = server.bind(host, port);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cerr << "listening on http://" << host << ":" << bound << '\n';
  server.listen();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chest film report generation"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset");
  std::string synth_out, findings = "effusion,enlarged_heart,increased_markings", split = "0.8,0.1,0.1";
  std::size_t synth_n = 250, image_size = 64;
  std::uint64_t synth_seed = 42, split_seed = 7;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n", synth_n, "Number of samples");
  synth->add_option("--seed", synth_seed, "Generation seed");
  synth->add_option("--split-seed", split_seed, "Split seed");
  synth->add_option("--image-size", image_size, "Image side in pixels");
  synth->add_option("--findings", findings, "Comma-separated finding labels");
  synth->add_option("--split", split, "train,val,test ratios");

  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_data, tr_config, tr_out, tr_resume;
  std::vector<std::string> tr_set;
  std::size_t tr_stop = 0;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--config", tr_config, "Config file");
  tr->add_option("--set", tr_set, "Override a config key (key=value)");
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--resume", tr_resume, "Continue from a checkpoint");
  tr->add_option("--stop-after", tr_stop, "Stop after this epoch");

  auto* gen = app.add_subcommand("generate", "Generate reports");
  std::string gen_ckpt, gen_image, gen_data, gen_split = "test", gen_out;
  BeamArgs gen_beam;
  gen->add_option("--checkpoint", gen_ckpt, "Checkpoint file")->required();
  gen->add_option("--image", gen_image, "Single PNG image");
  gen->add_option("--data", gen_data, "Dataset directory");
  gen->add_option("--split", gen_split, "Split to generate for");
  gen->add_option("--out", gen_out, "Output JSONL (default stdout)");
  gen_beam.add(gen);

  auto* ev = app.add_subcommand("eval", "Score reports");
  std::string ev_cands, ev_refs, ev_ckpt, ev_data, ev_split = "test", ev_out;
  double ev_scale = 1.0;
  BeamArgs ev_beam;
  ev->add_option("--candidates", ev_cands, "Candidate JSONL {id, report}");
  ev->add_option("--references", ev_refs, "Reference JSONL {id, report}");
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint to evaluate on --data");
  ev->add_option("--data", ev_data, "Dataset directory");
  ev->add_option("--split", ev_split, "Split to evaluate");
  ev->add_option("--scale", ev_scale, "Display multiplier for scores (1 or 10)");
  ev->add_option("--out", ev_out, "Output JSON (default stdout)");
  ev_beam.add(ev);

  auto* viz = app.add_subcommand("viz", "Render attention heatmaps");
  std::string viz_ckpt, viz_image, viz_out, viz_mode = "beam";
  BeamArgs viz_beam;
  viz->add_option("--checkpoint", viz_ckpt, "Checkpoint file")->required();
  viz->add_option("--image", viz_image, "PNG image")->required();
  viz->add_option("--out", viz_out, "Output directory")->required();
  viz->add_option("--mode", viz_mode, "greedy or beam")->check(CLI::IsMember({"greedy", "beam"}));
  viz_beam.add(viz);

  auto* serve = app.add_subcommand("serve", "Run the blind review service");
  std::string serve_host = "127.0.0.1", serve_dir, serve_dataset, serve_ckpt;
  int serve_port = 8080;
  BeamArgs serve_beam;
  serve->add_option("--port", serve_port, "Port (0 picks one)");
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--data-dir", serve_dir, "Session log directory")->required();
  serve->add_option("--dataset", serve_dataset, "Dataset whose test split feeds new sessions");
  serve->add_option("--checkpoint", serve_ckpt, "Model used for generated reports");
  serve_beam.add(serve);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_out, synth_n, synth_seed, split_seed, image_size, findings, split);
    if (*tr) return cmd_train(tr_data, tr_config, tr_set, tr_out, tr_resume, tr_stop);
    if (*gen) return cmd_generate(gen_ckpt, gen_image, gen_data, gen_split, gen_beam, gen_out);
    if (*ev) {
      if (!ev_ckpt.empty()) {
        if (ev_data.empty()) throw std::invalid_argument("eval --checkpoint needs --data");
        return cmd_eval_model(ev_ckpt, ev_data, ev_split, ev_beam, ev_scale, ev_out);
      }
      if (ev_cands.empty() || ev_refs.empty()) {
        throw std::invalid_argument("eval needs --candidates and --references, or --checkpoint and --data");
      }
      return cmd_eval_text(ev_cands, ev_refs, ev_scale, ev_out);
    }
    if (*viz) return cmd_viz(viz_ckpt, viz_image, viz_out, viz_mode, viz_beam);
    if (*serve) return cmd_serve(serve_host, serve_port, serve_dir, serve_dataset, serve_ckpt, serve_beam);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
