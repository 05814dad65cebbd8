// Runs the acceptance experiments and prints one PASS/FAIL line for each.
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "slt/config.hpp"
#include "slt/data.hpp"
#include "slt/gradcheck.hpp"
#include "slt/metrics.hpp"
#include "slt/ops.hpp"
#include "slt/train.hpp"
#include "slt/vision.hpp"

namespace fs = std::filesystem;
using namespace slt;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <class T>
BasicTensor<T> random_tensor(Shape shape, SplitMix64& rng, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(rng.uniform(-1.0, 1.0));
  return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <class T>
std::vector<T> values(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

std::vector<float> flat_params(const SltModel<float>& m) {
  std::vector<float> out;
  for (const auto& [name, p] : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

RunConfig desk_config() {
  std::ifstream in(SLT_CONFIGS "/desk.json");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

RunConfig tiny_config() {
  RunConfig c;
  c.visual = {10, 4, 4, 8, 16, 16};
  c.language.d_model = 16;
  c.language.n_heads = 2;
  c.language.n_layers = 1;
  c.language.d_ffn = 32;
  c.language.dropout = 0.0;
  c.optim.batch_size = 2;
  c.optim.accum_steps = 1;
  c.optim.warmup = 10;
  c.seed = 7;
  return c;
}

Dataset random_dataset(std::size_t n, std::size_t vocab, const ClipShape& shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Tensor> clips;
  std::vector<std::vector<int>> targets;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(3 * shape.depth * shape.height * shape.width);
    for (auto& x : v) x = float(rng.uniform());
    clips.emplace_back(Shape{3, shape.depth, shape.height, shape.width}, std::move(v));
    std::vector<int> t(1 + rng.below(4));
    for (auto& id : t) id = kNumSpecials + int(rng.below(vocab - kNumSpecials));
    t.push_back(kEosId);
    targets.push_back(std::move(t));
  }
  return {std::move(clips), std::move(targets)};
}

Outcome gradient_suite() {
  using TD = BasicTensor<double>;
  using Op = std::function<TD(std::vector<TD>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> inputs;
    Op op;
    bool kinked = false;
  };
  SplitMix64 rng(99);
  GradcheckOptions opts;
  opts.step = 1e-6;
  opts.tolerance = 1e-3;
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0, cases_run = 0;
  bool ok = true;

  const std::vector<int> ids = {0, 2, 1, 2};
  const std::vector<int> targets = {4, kEosId, 5, kPadId};
  const std::vector<std::uint8_t> mask = {1, 1, 1, 0};
  const std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& in) { return matmul(in[0], in[1]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 2}}, [](auto& in) { return matmul(in[0], in[1]); }},
      {"transpose", {{2, 3, 4}}, [](auto& in) { return transpose(in[0], 0, 2); }},
      {"reshape", {{3, 4}}, [](auto& in) { return reshape(in[0], {12}); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& in) { return add(in[0], in[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& in) { return sub(in[0], in[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in) { return mul(in[0], in[1]); }},
      {"add_bias", {{3, 4}, {4}}, [](auto& in) { return add_bias(in[0], in[1]); }},
      {"scale", {{3, 4}}, [](auto& in) { return scale(in[0], -1.7); }},
      {"relu", {{3, 4}}, [](auto& in) { return relu(in[0]); }, true},
      {"softmax", {{3, 4}}, [](auto& in) { return softmax(in[0]); }},
      {"softmax_axis0", {{3, 4, 2}}, [](auto& in) { return softmax(in[0], 0); }},
      {"log_softmax", {{3, 4}}, [](auto& in) { return log_softmax(in[0]); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](auto& in) { return layer_norm(in[0], in[1], in[2]); }},
      {"group_norm", {{4, 3, 2}, {4}, {4}}, [](auto& in) { return group_norm(in[0], in[1], in[2], 2); }},
      {"conv3d", {{2, 3, 4, 4}, {2, 2, 2, 2, 2}},
       [](auto& in) { return conv3d(in[0], in[1], {1, 1, 1}, {1, 0, 1}); }},
      {"conv3d_strided", {{2, 4, 5, 5}, {2, 2, 3, 3, 3}},
       [](auto& in) { return conv3d(in[0], in[1], {2, 2, 2}, {1, 1, 1}); }},
      {"max_pool3d", {{2, 4, 4, 4}}, [](auto& in) { return max_pool3d(in[0], {3, 3, 3}, {2, 2, 2}, {1, 1, 1}); },
       true},
      {"global_avg_pool", {{3, 2, 3, 2}}, [](auto& in) { return global_avg_pool(in[0]); }},
      {"embedding", {{3, 4}}, [ids](auto& in) { return embedding(in[0], ids); }},
      {"sum", {{3, 4}}, [](auto& in) { return sum(in[0]); }},
      {"mean", {{3, 4}}, [](auto& in) { return mean(in[0]); }},
      {"dropout", {{3, 4}},
       [](auto& in) {
         SplitMix64 r(5);
         return dropout(in[0], 0.3, r);
       }},
      {"swm_split", {{12}}, [](auto& in) { return swm_split(in[0], 4); }},
      {"label_smoothed_ce", {{4, 7}},
       [targets, mask](auto& in) { return label_smoothed_ce<double>(in[0], targets, mask, 0.1); }},
  };
  for (const auto& cs : cases) {
    std::vector<TD> inputs;
    for (const auto& s : cs.inputs) inputs.push_back(random_tensor<double>(s, rng, true));
    if (cs.kinked) {
      auto v = inputs[0].mutable_data();
      std::vector<double> grid(v.size());
      for (std::size_t i = 0; i < grid.size(); ++i)
        grid[i] = double(i + 1) / double(grid.size() + 1) * (i % 2 ? 1.0 : -1.0);
      rng.shuffle(grid.begin(), grid.end());
      std::copy(grid.begin(), grid.end(), v.begin());
    }
    TD readout;
    {
      NoGradGuard g;
      readout = random_tensor<double>(cs.op(inputs).shape(), rng);
    }
    const auto r = gradcheck<double>([&] { return sum(mul(cs.op(inputs), readout)); }, inputs, opts);
    ++cases_run;
    checks += r.checked;
    ok &= r.pass;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = cs.name;
    }
  }

  const RunConfig tiny = tiny_config();
  GradcheckOptions model_opts = opts;
  model_opts.max_checks_per_leaf = 6;
  model_opts.seed = 1;
  const auto m = check_model_gradients(tiny.model_config(10), tiny.clip_shape(), 7, model_opts);
  ok &= m.pass;
  return {ok, fmt("%zu ops (%zu checks, worst %.2e in %s); full model %zu checks, max rel err %.2e, tol 1e-3",
                  cases_run, checks, worst, worst_name.c_str(), m.checked, m.max_rel_err)};
}

Outcome shape_contract() {
  const RunConfig d;
  const bool table = d.visual.swm == 32 && d.visual.depth == 50 && d.optim.batch_size == 10 &&
                     d.optim.accum_steps == 32 && d.optim.warmup == 4000 &&
                     d.language.max_output_len == 50 && d.data.max_tokens == 50 && d.optim.patience == 14 &&
                     d.language.d_model == 512;
  const ModelConfig mc = d.model_config(kNumSpecials + 100);
  SltModel<float> model(mc, 1);
  SplitMix64 rng(3);
  const Tensor clip = random_tensor<float>({3, 100, 224, 224}, rng);
  NoGradGuard ng;
  const auto t0 = Clock::now();
  const Tensor feature = model.visual().forward(clip);
  const Tensor chunks = swm_split(feature, mc.swm);
  const Tensor memory = model.encode(clip);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool shapes = feature.shape() == Shape{2048} && chunks.shape() == Shape{32, 64} &&
                      memory.shape() == Shape{32, 512};
  return {table && shapes && secs < 300,
          fmt("defaults %s; feature %s, swm %s, memory %s; two forwards %.1fs (<300s)", table ? "ok" : "WRONG",
              shape_str(feature.shape()).c_str(), shape_str(chunks.shape()).c_str(),
              shape_str(memory.shape()).c_str(), secs)};
}

struct OverfitRun {
  double seconds = 0;
  std::size_t steps = 0;
  TeacherForcedScores scores;
  std::size_t exact = 0;
  std::size_t n = 0;
  double bleu = 0;
  std::string step_log;
  std::vector<std::string> sentences;
};

OverfitRun overfit_run() {
  const RunConfig cfg = desk_config();
  SplitMix64 rng(cfg.seed);
  const auto corpus = synth_corpus(8, 12, cfg.clip_shape(), rng);
  const Vocabulary vocab = build_vocab(corpus.sentences);
  std::vector<std::vector<int>> targets;
  for (const auto& s : corpus.sentences) targets.push_back(vocab.encode(tokenize_german(s)));
  const Dataset data(corpus.clips, targets);

  OverfitRun r;
  r.sentences = corpus.sentences;
  r.n = corpus.sentences.size();
  const auto t0 = Clock::now();
  SltModel<float> model(cfg.model_config(vocab.size()), cfg.seed);
  Adam adam(model.parameters(), cfg.optim);
  std::ostringstream log;
  TrainOptions opts;
  opts.config = cfg;
  opts.vocab = vocab;
  opts.step_log = &log;
  opts.max_steps = 2000;
  const auto result = train_loop(model, adam, data, data, opts);
  r.steps = result.state.global_step;
  r.step_log = log.str();
  r.scores = teacher_forced_scores(model, data);
  std::vector<std::string> hyps;
  for (std::size_t i = 0; i < r.n; ++i) {
    hyps.push_back(postprocess_output(model.translate(data.clip(i)), vocab));
    r.exact += hyps.back() == corpus.sentences[i];
  }
  r.bleu = bleu(hyps, corpus.sentences).value;
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

Outcome stem_moves() {
  const RunConfig run = tiny_config();
  SltModel<float> model(run.model_config(12), run.seed);
  const auto before = values(model.visual().stem_kernel());
  Adam adam(model.parameters(), run.optim);
  const Dataset data = random_dataset(2, 12, run.clip_shape(), 4);
  TrainOptions opt;
  opt.config = run;
  opt.max_steps = 1;
  opt.dev_score = [](const SltModel<float>&, std::size_t) { return 1.0; };
  train_loop(model, adam, data, {}, opt);
  const auto after = values(model.visual().stem_kernel());
  double delta = 0;
  for (std::size_t i = 0; i < before.size(); ++i) delta = std::max(delta, double(std::abs(after[i] - before[i])));
  return {delta > 0, fmt("max |delta| of stem kernel after one step = %.3e", delta)};
}

Outcome accumulation() {
  const RunConfig run = tiny_config();
  const Dataset data = random_dataset(8, 12, run.clip_shape(), 8);
  SplitMix64 ra(11), rb(11);
  const auto small = batch_iter(data.targets(), 2, ra);
  const auto large = batch_iter(data.targets(), 8, rb);
  SltModel<float> a(run.model_config(12), 3), b(run.model_config(12), 3);
  accumulate_window(a, data, small, 0.1);
  accumulate_window(b, data, large, 0.1);
  const auto start = flat_params(a);
  Adam adam_a(a.parameters(), run.optim), adam_b(b.parameters(), run.optim);
  adam_a.step(1e-3);
  adam_b.step(1e-3);
  const auto pa = flat_params(a), pb = flat_params(b);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < start.size(); ++i) {
    const double da = double(pa[i]) - start[i], db = double(pb[i]) - start[i];
    diff += (da - db) * (da - db);
    norm += db * db;
  }
  const double rel = std::sqrt(diff / norm);
  return {small.size() == 4 && large.size() == 1 && rel < 1e-5,
          fmt("%zu micro-batches of 2 vs 1 batch of 8: relative update difference %.2e (<1e-5)", small.size(),
              rel)};
}

Outcome metric_conformance() {
  auto lines = [](const char* name) {
    std::ifstream in(fs::path(SLT_FIXTURES) / name);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  };
  const auto hyp = lines("metrics_hyp.de"), ref = lines("metrics_ref.de");
  std::ifstream in(fs::path(SLT_FIXTURES) / "metrics_expected.json");
  const auto expected = nlohmann::json::parse(in);
  const double b = bleu(hyp, ref).value, c = chrf2pp(hyp, ref).value;
  const double eb = expected["bleu"], ec = expected["chrf"];
  const std::vector<std::string> empty(ref.size());
  const double ib = bleu(ref, ref).value, ic = chrf2pp(ref, ref).value;
  const double zb = bleu(empty, ref).value, zc = chrf2pp(empty, ref).value;
  const bool ok = hyp.size() == 20 && ref.size() == 20 && std::abs(b - eb) < 0.01 && std::abs(c - ec) < 0.01 &&
                  std::abs(ib - 100) < 1e-9 && std::abs(ic - 100) < 1e-9 && zb == 0 && zc == 0;
  return {ok, fmt("BLEU %.4f vs %.4f, chrF2++ %.4f vs %.4f (20 pairs); identity %.2f/%.2f; empty %.1f/%.1f", b, eb,
                  c, ec, ib, ic, zb, zc)};
}

Outcome early_stopping() {
  RunConfig run = tiny_config();
  run.optim.patience = OptimConfig{}.patience;
  SltModel<float> model(run.model_config(12), run.seed);
  Adam adam(model.parameters(), run.optim);
  const Dataset data = random_dataset(2, 12, run.clip_shape(), 3);
  TrainOptions opt;
  opt.config = run;
  opt.dev_score = [](const SltModel<float>&, std::size_t) { return 7.5; };
  const auto r = train_loop(model, adam, data, {}, opt);
  const std::size_t further = r.state.epoch - 1;
  return {r.stopped_early && further == 14 && run.optim.patience == 14,
          fmt("constant dev PPL: stopped after %zu further epochs (patience %zu)", further, run.optim.patience)};
}

Outcome scheduler() {
  const double lr = noam_lr(4000, 512);
  std::size_t peak = 1;
  for (std::size_t s = 1; s <= 40000; ++s)
    if (noam_lr(s, 512) > noam_lr(peak, 512)) peak = s;
  return {std::abs(lr - 6.9877e-4) <= 1e-8 && peak == 4000,
          fmt("noam_lr(4000, 512) = %.10f, peak at step %zu", lr, peak)};
}

Outcome round_trips() {
  const fs::path dir = fs::temp_directory_path() / "slt_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const std::vector<SubtitleEntry> entries = {{1, 1000, 2500, "Guten Abend."}, {2, 61000, 3723004, "Regen, Wind."}};
  const std::string srt = serialize_srt(entries);
  const bool srt_ok = parse_srt(srt) == entries && serialize_srt(parse_srt(srt)) == srt;

  SplitMix64 rng(17);
  const Tensor clip = random_tensor<float>({3, 5, 7, 6}, rng);
  write_clip(dir / "c.sltc", clip);
  const Tensor back = read_clip(dir / "c.sltc");
  const bool clip_ok = back.shape() == clip.shape() && values(back) == values(clip);

  const RunConfig run = tiny_config();
  std::vector<std::string> tokens = Vocabulary().tokens();
  for (int i = 0; i < 8; ++i) tokens.push_back("w" + std::to_string(i));
  const Vocabulary vocab = Vocabulary::from_tokens(tokens);
  SltModel<float> model(run.model_config(vocab.size()), 21);
  Adam adam(model.parameters(), run.optim);
  const Dataset data = random_dataset(2, vocab.size(), run.clip_shape(), 10);
  SplitMix64 brng(2);
  accumulate_window(model, data, batch_iter(data.targets(), 2, brng), 0.1);
  adam.step(1e-3);
  save_checkpoint(dir / "m.ckpt", {"best", run, vocab, {}}, model, &adam);
  const auto loaded = load_checkpoint(dir / "m.ckpt");
  const std::vector<int> inputs = {kBosId, 5, 6};
  const bool ckpt_ok = values(model.forward(data.clip(0), inputs)) ==
                           values(loaded.model->forward(data.clip(0), inputs)) &&
                       loaded.adam_m == adam.first_moments() && loaded.adam_v == adam.second_moments();
  fs::remove_all(dir);
  return {srt_ok && clip_ok && ckpt_ok, fmt("SRT %s, ClipFile %s, checkpoint forward %s", srt_ok ? "identical" : "DIFFERS",
                                            clip_ok ? "identical" : "DIFFERS", ckpt_ok ? "bitwise" : "DIFFERS")};
}

}  // namespace

int main() {
  report("gradient suite", gradient_suite);
  report("shape contract", shape_contract);

  OverfitRun first, second;
  report("overfit experiment", [&] {
    first = overfit_run();
    const bool ok = first.steps <= 2000 && first.scores.token_accuracy >= 0.95 && first.scores.perplexity < 1.1 &&
                    first.exact >= 7 && first.seconds < 600;
    return Outcome{ok, fmt("%zu steps: token accuracy %.4f, PPL %.4f, exact %zu/%zu, BLEU %.2f, %.1fs", first.steps,
                           first.scores.token_accuracy, first.scores.perplexity, first.exact, first.n, first.bleu,
                           first.seconds)};
  });
  report("joint training reaches the stem", stem_moves);
  report("gradient accumulation", accumulation);
  report("metric conformance", metric_conformance);
  report("early stopping", early_stopping);
  report("scheduler", scheduler);
  report("round trips", round_trips);
  report("determinism", [&] {
    second = overfit_run();
    const std::vector<std::string> h = {"w1 w2 w3", "w4 w5", "w6 w2 w1 w7", "w3"};
    const std::vector<std::string> r = {"w1 w2 w4", "w4 w5", "w6 w2 w1", "w3 w3"};
    const auto a = bootstrap_ci(h, r, Metric::chrf);
    const auto b = bootstrap_ci(h, r, Metric::chrf);
    const bool logs = !first.step_log.empty() && first.step_log == second.step_log;
    const bool boot = a.value == b.value && a.ci_low == b.ci_low && a.ci_high == b.ci_high;
    return Outcome{logs && boot, fmt("seed-7 runs: %zu log bytes %s; bootstrap seed 12345 %s", first.step_log.size(),
                                     logs ? "identical" : "DIFFER", boot ? "identical" : "DIFFERS")};
  });
  report("random-walk baseline below overfit model", [&] {
    std::vector<std::vector<std::string>> tokenized;
    std::vector<std::size_t> lengths;
    for (const auto& s : first.sentences) {
      tokenized.push_back(tokenize_german(s));
      lengths.push_back(tokenized.back().size());
    }
    SplitMix64 rng(kBootstrapSeed);
    const auto walk = random_walk_baseline(unigram_table(tokenized), first.sentences.size(), lengths, rng);
    const double rw = bleu(walk, first.sentences).value;
    return Outcome{rw < first.bleu, fmt("random walk BLEU %.2f < overfit BLEU %.2f", rw, first.bleu)};
  });

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
