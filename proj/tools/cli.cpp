#include "slt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "slt/config.hpp"
#include "slt/data.hpp"
#include "slt/errors.hpp"
#include "slt/metrics.hpp"
#include "slt/train.hpp"

namespace fs = std::filesystem;

namespace slt {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Relative clip paths are tried as given, then against the manifest's folder.
std::vector<ManifestRecord> load_manifest(const fs::path& path) {
  auto records = read_manifest(path);
  for (auto& r : records) {
    const fs::path p(r.clip_path);
    if (p.is_relative() && !fs::exists(p)) r.clip_path = (path.parent_path() / p).string();
  }
  return records;
}

std::vector<std::string> sentences_of(const std::vector<ManifestRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.sentence);
  return out;
}

Dataset make_dataset(const std::vector<ManifestRecord>& records, const Vocabulary& vocab,
                     const ClipShape& shape, std::size_t workers) {
  std::vector<std::string> paths;
  std::vector<std::vector<int>> targets;
  for (const auto& r : records) {
    paths.push_back(r.clip_path);
    targets.push_back(vocab.encode(tokenize_german(r.sentence)));
  }
  // Small corpora are kept in memory; larger ones stream from disk per batch.
  const double bytes = double(records.size()) * 3.0 * double(shape.depth * shape.height * shape.width) * 4.0;
  if (bytes <= double(1ULL << 30)) return Dataset(load_clips(paths, shape, workers), std::move(targets));
  return Dataset(std::move(paths), shape, std::move(targets), workers);
}

RunConfig tiny_config() {
  RunConfig c;
  c.visual = {10, 4, 4, 8, 16, 16};
  c.language.d_model = 16;
  c.language.n_heads = 2;
  c.language.n_layers = 1;
  c.language.d_ffn = 32;
  c.language.dropout = 0.0;
  c.seed = 7;
  return c;
}

struct ConfigFlags {
  std::string path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> train_manifest, dev_manifest;
  std::optional<std::size_t> max_epochs, patience, warmup, accum_steps, batch_size, workers;
  std::optional<double> lr_scale, smoothing, dropout;

  void add(CLI::App* app) {
    app->add_option("--config", path, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--seed", seed);
    app->add_option("--train-manifest", train_manifest);
    app->add_option("--dev-manifest", dev_manifest);
    app->add_option("--max-epochs", max_epochs);
    app->add_option("--patience", patience);
    app->add_option("--warmup", warmup);
    app->add_option("--accum-steps", accum_steps);
    app->add_option("--batch-size", batch_size);
    app->add_option("--workers", workers);
    app->add_option("--lr-scale", lr_scale);
    app->add_option("--smoothing", smoothing);
    app->add_option("--dropout", dropout);
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig c = path.empty() ? base : parse_run_config(read_text(path));
    if (seed) c.seed = *seed;
    if (train_manifest) c.data.train_manifest = *train_manifest;
    if (dev_manifest) c.data.dev_manifest = *dev_manifest;
    if (max_epochs) c.optim.max_epochs = *max_epochs;
    if (patience) c.optim.patience = *patience;
    if (warmup) c.optim.warmup = *warmup;
    if (accum_steps) c.optim.accum_steps = *accum_steps;
    if (batch_size) c.optim.batch_size = *batch_size;
    if (workers) c.data.workers = *workers;
    if (lr_scale) c.optim.lr_scale = *lr_scale;
    if (smoothing) c.optim.smoothing = *smoothing;
    if (dropout) c.language.dropout = *dropout;
    c.validate();
    return c;
  }
};

struct PreprocessArgs {
  std::string srt, video, out_dir, manifest, commands;
  std::int64_t duration_ms = 0;
  std::size_t max_tokens = 50;
  bool execute = false;
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
  const auto entries = read_srt(a.srt);
  const auto plan = build_manifest(entries, a.video, a.duration_ms, a.out_dir);
  const auto filtered = filter_long(plan.records, a.max_tokens);
  const fs::path manifest = a.manifest.empty() ? fs::path(a.out_dir) / "manifest.tsv" : fs::path(a.manifest);
  write_manifest(manifest, filtered.kept);

  std::vector<std::string> commands;
  for (const auto& r : filtered.kept) commands.push_back(ffmpeg_command(a.video, r.start_ms, r.end_ms, r.clip_path));
  if (!a.commands.empty()) {
    write_lines(a.commands, commands);
  } else if (!a.execute) {
    for (const auto& c : commands) out << c << '\n';
  }
  if (a.execute) {
    for (const auto& c : commands) {
      if (std::system(c.c_str()) != 0) throw IoError("command failed: " + c);
    }
  }
  out << "manifest\t" << manifest.string() << "\nclips\t" << filtered.kept.size()
      << "\nout_of_range\t" << plan.dropped << "\ntoo_long\t" << filtered.dropped << '\n';
  return kExitOk;
}

int cmd_stats(const std::vector<std::string>& manifests, std::ostream& out) {
  std::vector<ManifestRecord> records;
  for (const auto& m : manifests) {
    auto r = read_manifest(m);
    records.insert(records.end(), r.begin(), r.end());
  }
  const auto c = corpus_stats(sentences_of(records));
  std::vector<double> secs;
  for (const auto& r : records) secs.push_back(double(r.end_ms - r.start_ms) / 1000.0);
  const auto v = video_stats(secs);
  out << "sentences\t" << c.sentence_count << '\n'
      << "vocabulary\t" << c.vocab_size << '\n'
      << "words_per_sentence\t" << format_stats(c.min, c.mean, c.max, c.std) << '\n'
      << "seconds_per_clip\t" << format_stats(v.min, v.mean, v.max, v.std) << '\n';
  return kExitOk;
}

struct TrainArgs {
  ConfigFlags config;
  std::string out_dir;
  std::size_t max_steps = 0;
  std::size_t periodic = 0;
  bool print_config = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = a.config.resolve();
  if (a.print_config) {
    out << to_json(cfg) << '\n';
    return kExitOk;
  }
  if (a.out_dir.empty()) throw ConfigError("train needs --out");
  if (cfg.data.train_manifest.empty()) throw ConfigError("train needs a train manifest");

  const auto train_records = filter_long(load_manifest(cfg.data.train_manifest), cfg.data.max_tokens).kept;
  if (train_records.empty()) throw ContractError("train manifest has no usable records");
  const auto dev_records = cfg.data.dev_manifest.empty()
                               ? train_records
                               : filter_long(load_manifest(cfg.data.dev_manifest), cfg.data.max_tokens).kept;
  const Vocabulary vocab = build_vocab(sentences_of(train_records));
  const ClipShape shape = cfg.clip_shape();
  const Dataset train = make_dataset(train_records, vocab, shape, cfg.data.workers);
  const Dataset dev = make_dataset(dev_records, vocab, shape, cfg.data.workers);

  fs::create_directories(a.out_dir);
  {
    auto f = open_out(fs::path(a.out_dir) / "config.json");
    f << to_json(cfg) << '\n';
  }
  auto step_log = open_out(fs::path(a.out_dir) / "steps.tsv");
  auto epoch_log = open_out(fs::path(a.out_dir) / "epochs.tsv");

  SltModel<float> model(cfg.model_config(vocab.size()), cfg.seed);
  Adam adam(model.parameters(), cfg.optim);
  TrainOptions opts;
  opts.config = cfg;
  opts.vocab = vocab;
  opts.checkpoint_dir = a.out_dir;
  opts.periodic_every = a.periodic;
  opts.step_log = &step_log;
  opts.epoch_log = &epoch_log;
  opts.max_steps = a.max_steps;
  const TrainResult result = train_loop(model, adam, train, dev, opts);

  const auto scores = teacher_forced_scores(model, train);
  ordered_json j = {
      {"steps", result.state.global_step},
      {"epochs", result.state.epoch},
      {"stopped_early", result.stopped_early},
      {"best_dev_ppl", result.state.best_dev_ppl},
      {"train_ppl", scores.perplexity},
      {"train_token_accuracy", scores.token_accuracy},
      {"vocab_size", vocab.size()},
      {"best_checkpoint", (fs::path(a.out_dir) / "best.ckpt").string()},
  };
  out << j.dump(2) << '\n';
  return kExitOk;
}

struct TranslateArgs {
  std::string checkpoint, manifest, out, refs_out;
};

int cmd_translate(const TranslateArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto records = load_manifest(a.manifest);
  const ClipShape shape = ckpt.meta.config.clip_shape();
  std::vector<std::string> hyps;
  for (const auto& r : records) {
    const auto ids = ckpt.model->translate(load_clip(r.clip_path, shape));
    hyps.push_back(postprocess_output(ids, ckpt.meta.vocab));
  }
  if (a.out.empty()) {
    for (const auto& h : hyps) out << h << '\n';
  } else {
    write_lines(a.out, hyps);
  }
  if (!a.refs_out.empty()) write_lines(a.refs_out, sentences_of(records));
  return kExitOk;
}

struct EvaluateArgs {
  std::string hyp, ref, metric = "bleu", out;
  std::size_t bootstrap = kBootstrapResamples;
  std::uint64_t seed = kBootstrapSeed;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto hyps = read_lines(a.hyp);
  const auto refs = read_lines(a.ref);
  std::vector<Metric> metrics;
  if (a.metric == "all") {
    metrics = {Metric::bleu, Metric::chrf};
  } else {
    metrics = {parse_metric(a.metric)};
  }
  ordered_json reports = ordered_json::array();
  for (Metric m : metrics) {
    const MetricScore s = a.bootstrap > 0 ? bootstrap_ci(hyps, refs, m, a.bootstrap, a.seed)
                                          : corpus_score(m, hyps, refs);
    reports.push_back(ordered_json::parse(metric_report_json(m, s)));
  }
  const std::string text = (reports.size() == 1 ? reports[0] : reports).dump(2);
  if (!a.out.empty()) {
    auto f = open_out(a.out);
    f << text << '\n';
  }
  out << text << '\n';
  return kExitOk;
}

struct BaselineArgs {
  std::string manifest, out;
  std::size_t n = 0;
  std::uint64_t seed = 1;
  bool uniform = false;
};

int cmd_baseline(const BaselineArgs& a, std::ostream& out) {
  const auto records = read_manifest(a.manifest);
  std::vector<std::vector<std::string>> tokenized;
  std::vector<std::size_t> lengths;
  for (const auto& r : records) {
    tokenized.push_back(tokenize_german(r.sentence));
    lengths.push_back(tokenized.back().size());
  }
  SplitMix64 rng(a.seed);
  const auto hyps = random_walk_baseline(unigram_table(tokenized), a.n ? a.n : records.size(), lengths,
                                         rng, a.uniform);
  if (a.out.empty()) {
    for (const auto& h : hyps) out << h << '\n';
  } else {
    write_lines(a.out, hyps);
  }
  return kExitOk;
}

struct GradcheckArgs {
  ConfigFlags config;
  std::size_t vocab_size = 10;
  std::size_t checks = 6;
  double step = 1e-6;
  double tolerance = 1e-3;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const RunConfig cfg = a.config.resolve(tiny_config());
  GradcheckOptions opts;
  opts.step = a.step;
  opts.tolerance = a.tolerance;
  opts.max_checks_per_leaf = a.checks;
  opts.seed = cfg.seed;
  const auto report = check_model_gradients(cfg.model_config(a.vocab_size), cfg.clip_shape(), cfg.seed, opts);
  ordered_json j = {
      {"pass", report.pass},
      {"checked", report.checked},
      {"max_rel_err", report.max_rel_err},
      {"tolerance", a.tolerance},
      {"worst_leaf", report.worst_leaf},
      {"worst_index", report.worst_index},
      {"worst_analytic", report.worst_analytic},
      {"worst_numeric", report.worst_numeric},
  };
  out << j.dump(2) << '\n';
  return report.pass ? kExitOk : kExitData;
}

struct SynthArgs {
  std::string out_dir;
  std::size_t n = 8;
  std::size_t vocab_size = 12;
  std::uint64_t seed = 7;
  std::size_t frames = 8, height = 16, width = 16;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SplitMix64 rng(a.seed);
  const auto corpus = synth_corpus(a.n, a.vocab_size, {a.frames, a.height, a.width}, rng);
  const auto records = write_synth_corpus(a.out_dir, corpus);
  out << "manifest\t" << (fs::path(a.out_dir) / "manifest.tsv").string() << "\nclips\t" << records.size()
      << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sign language translation: data preparation, training and evaluation"};
  app.name(args.empty() ? "slt" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Cut subtitle-aligned clips: manifest and ffmpeg commands");
  p->add_option("--srt", pre.srt)->required()->check(CLI::ExistingFile);
  p->add_option("--video", pre.video)->required();
  p->add_option("--duration-ms", pre.duration_ms, "Video length in milliseconds")->required();
  p->add_option("--out-dir", pre.out_dir, "Where clips will be written")->required();
  p->add_option("--manifest", pre.manifest, "Defaults to <out-dir>/manifest.tsv");
  p->add_option("--commands", pre.commands, "Write ffmpeg commands here instead of stdout");
  p->add_option("--max-tokens", pre.max_tokens);
  p->add_flag("--execute", pre.execute, "Run the ffmpeg commands");

  std::vector<std::string> stats_manifests;
  auto* st = app.add_subcommand("stats", "Sentence and clip statistics of manifests");
  st->add_option("--manifest", stats_manifests)->required()->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; writes checkpoints and TSV logs");
  tr.config.add(t);
  t->add_option("--out", tr.out_dir, "Output folder for checkpoints and logs");
  t->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  t->add_option("--periodic", tr.periodic, "Save epoch_NNNN.ckpt every N epochs");
  t->add_flag("--print-config", tr.print_config, "Print the effective configuration and exit");

  TranslateArgs tl;
  auto* x = app.add_subcommand("translate", "Greedy-decode every clip of a manifest");
  x->add_option("--checkpoint", tl.checkpoint)->required()->check(CLI::ExistingFile);
  x->add_option("--manifest", tl.manifest)->required()->check(CLI::ExistingFile);
  x->add_option("--out", tl.out, "Hypothesis file; stdout when absent");
  x->add_option("--refs-out", tl.refs_out, "Also write the manifest sentences here");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score hypotheses against references");
  e->add_option("--hyp", ev.hyp)->required()->check(CLI::ExistingFile);
  e->add_option("--ref", ev.ref)->required()->check(CLI::ExistingFile);
  e->add_option("--metric", ev.metric, "bleu, chrf or all")->check(CLI::IsMember({"bleu", "chrf", "all"}));
  e->add_option("--bootstrap", ev.bootstrap, "Resamples; 0 disables")->capture_default_str();
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->add_option("--out", ev.out, "Also write the JSON report here");

  BaselineArgs bl;
  auto* b = app.add_subcommand("baseline", "Random-walk hypotheses from training statistics");
  b->add_option("--manifest", bl.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  b->add_option("-n,--sentences", bl.n, "Defaults to the manifest size");
  b->add_option("--seed", bl.seed);
  b->add_flag("--uniform", bl.uniform, "Sample tokens uniformly instead of by frequency");
  b->add_option("--out", bl.out);

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  gc.config.add(g);
  g->add_option("--vocab-size", gc.vocab_size)->capture_default_str();
  g->add_option("--checks", gc.checks, "Sampled elements per parameter; 0 = all")->capture_default_str();
  g->add_option("--step", gc.step)->capture_default_str();
  g->add_option("--tol", gc.tolerance)->capture_default_str();

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Write a synthetic clip/sentence corpus");
  s->add_option("--out", sy.out_dir)->required();
  s->add_option("-n,--sentences", sy.n)->capture_default_str();
  s->add_option("--vocab-size", sy.vocab_size)->capture_default_str();
  s->add_option("--seed", sy.seed)->capture_default_str();
  s->add_option("--frames", sy.frames)->capture_default_str();
  s->add_option("--height", sy.height)->capture_default_str();
  s->add_option("--width", sy.width)->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("slt");
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (p->parsed()) return cmd_preprocess(pre, out);
    if (st->parsed()) return cmd_stats(stats_manifests, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (x->parsed()) return cmd_translate(tl, out);
    if (e->parsed()) return cmd_evaluate(ev, out);
    if (b->parsed()) return cmd_baseline(bl, out);
    if (g->parsed()) return cmd_gradcheck(gc, out);
    if (s->parsed()) return cmd_synth(sy, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace slt
