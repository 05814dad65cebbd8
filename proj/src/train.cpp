#include "slt/train.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "config_json.hpp"
#include "slt/errors.hpp"
#include "slt/ops.hpp"

namespace slt {

namespace fs = std::filesystem;
using nlohmann::json;

template <class T>
BasicTensor<T> label_smoothed_ce(const BasicTensor<T>& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask, double smoothing,
                                 double normalizer) {
  if (logits.rank() != 2) throw DimensionError("logits must be [T,V], got " + shape_str(logits.shape()));
  const std::size_t len = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != len || mask.size() != len) {
    throw DimensionError("targets/mask length must match the " + std::to_string(len) + " logit rows");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("smoothing must lie in [0,1)");
  if (smoothing > 0.0 && vocab < 3) throw ConfigError("label smoothing needs at least 3 classes");

  const double off = vocab > 2 ? smoothing / double(vocab - 2) : 0.0;
  std::vector<T> q(len * vocab, T{0});
  std::size_t count = 0;
  for (std::size_t t = 0; t < len; ++t) {
    if (!mask[t]) continue;
    const int y = targets[t];
    if (y < 0 || std::size_t(y) >= vocab) {
      throw ContractError("target id " + std::to_string(y) + " outside vocabulary");
    }
    if (y == kPadId) throw ContractError("PAD target at an unmasked position");
    ++count;
    T* row = q.data() + t * vocab;
    for (std::size_t k = 1; k < vocab; ++k) row[k] = T(off);
    row[y] = T(1.0 - smoothing);
  }
  if (count == 0) throw ContractError("loss over an all-PAD mask");
  const double norm = normalizer > 0.0 ? normalizer : double(count);
  const BasicTensor<T> weights({len, vocab}, std::move(q));
  return scale(sum(mul(weights, log_softmax(logits))), -1.0 / norm);
}

template BasicTensor<float> label_smoothed_ce(const BasicTensor<float>&, std::span<const int>,
                                              std::span<const std::uint8_t>, double, double);
template BasicTensor<double> label_smoothed_ce(const BasicTensor<double>&, std::span<const int>,
                                               std::span<const std::uint8_t>, double, double);

double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0) throw ContractError("schedule steps start at 1");
  if (d_model == 0 || warmup == 0) throw ConfigError("d_model and warmup must be positive");
  const double s = double(step);
  return std::pow(double(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

Adam::Adam(NamedTensors<float> params, const OptimConfig& config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.size(), 0.f);
    v_.emplace_back(p.size(), 0.f);
  }
}

void Adam::step(double lr) {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    auto values = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = (grad.empty() ? 0.0 : double(grad[j])) + config_.weight_decay * values[j];
      m[j] = float(b1 * m[j] + (1.0 - b1) * g);
      v[j] = float(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      values[j] = float(values[j] - lr * mhat / (std::sqrt(vhat) + config_.epsilon));
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

Dataset::Dataset(std::vector<Tensor> clips, std::vector<std::vector<int>> targets)
    : clips_(std::move(clips)), targets_(std::move(targets)) {
  if (clips_.size() != targets_.size()) throw ContractError("clip and target counts differ");
}

Dataset::Dataset(std::vector<std::string> clip_paths, ClipShape shape,
                 std::vector<std::vector<int>> targets, std::size_t workers)
    : paths_(std::move(clip_paths)), shape_(shape), workers_(workers), targets_(std::move(targets)) {
  if (paths_.size() != targets_.size()) throw ContractError("clip and target counts differ");
}

std::vector<Tensor> Dataset::clips(const std::vector<std::size_t>& indices) const {
  if (paths_.empty()) {
    std::vector<Tensor> out;
    for (auto i : indices) out.push_back(clips_.at(i));
    return out;
  }
  std::vector<std::string> paths;
  for (auto i : indices) paths.push_back(paths_.at(i));
  return load_clips(paths, shape_, workers_);
}

Tensor Dataset::clip(std::size_t i) const { return clips({i}).front(); }

TeacherForcedScores teacher_forced_scores(const SltModel<float>& model, const Dataset& data) {
  if (data.empty()) throw ContractError("cannot score an empty dataset");
  NoGradGuard no_grad;
  double nll = 0;
  std::size_t tokens = 0, correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& target = data.targets()[i];
    const auto logits = model.forward(data.clip(i), shift_right(target));
    const std::size_t vocab = logits.dim(1);
    for (std::size_t t = 0; t < target.size(); ++t) {
      const float* row = logits.data().data() + t * vocab;
      std::size_t best = 0;
      double mx = row[0];
      for (std::size_t k = 1; k < vocab; ++k) {
        if (row[k] > row[best]) best = k;
        mx = std::max(mx, double(row[k]));
      }
      double z = 0;
      for (std::size_t k = 0; k < vocab; ++k) z += std::exp(double(row[k]) - mx);
      nll += mx + std::log(z) - double(row[target[t]]);
      correct += best == std::size_t(target[t]);
      ++tokens;
    }
  }
  TeacherForcedScores s;
  s.tokens = tokens;
  s.mean_nll = nll / double(tokens);
  s.perplexity = std::exp(s.mean_nll);
  s.token_accuracy = double(correct) / double(tokens);
  return s;
}

double perplexity(const SltModel<float>& model, const Dataset& data) {
  return teacher_forced_scores(model, data).perplexity;
}

bool EarlyStopping::update(TrainState& state, double score) const {
  state.last_dev_ppl = score;
  if (score < state.best_dev_ppl) {
    state.best_dev_ppl = score;
    state.epochs_since_improve = 0;
    return true;
  }
  ++state.epochs_since_improve;
  return false;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_records(std::string& out, const NamedTensors<float>& params,
                   const std::vector<std::vector<float>>* values) {
  put_u32(out, std::uint32_t(values && values->empty() ? 0 : params.size()));
  if (values && values->empty()) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    put_u32(out, std::uint32_t(name.size()));
    out += name;
    put_u32(out, std::uint32_t(p.rank()));
    for (auto d : p.shape()) put_u32(out, std::uint32_t(d));
    std::span<const float> data = values ? std::span<const float>((*values)[i]) : p.data();
    for (float x : data) put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
}

std::vector<Record> read_records(Reader& in) {
  const std::uint32_t count = in.u32();
  if (count > in.remaining() / 12) throw FormatError("checkpoint is truncated");
  std::vector<Record> records(count);
  for (auto& r : records) {
    r.name = in.take(in.u32());
    const std::uint32_t rank = in.u32();
    if (rank > in.remaining() / 4) throw FormatError("checkpoint is truncated");
    r.shape.resize(rank);
    for (auto& d : r.shape) d = in.u32();
    const std::size_t n = numel(r.shape);
    if (n > in.remaining() / 4) throw FormatError("checkpoint is truncated");
    r.values.resize(n);
    for (auto& x : r.values) x = std::bit_cast<float>(in.u32());
  }
  return records;
}

json nullable(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double from_nullable(const json& j, double fallback) {
  return j.is_null() ? fallback : j.get<double>();
}

json state_json(const TrainState& s) {
  return {{"global_step", s.global_step},
          {"epoch", s.epoch},
          {"best_dev_ppl", nullable(s.best_dev_ppl)},
          {"epochs_since_improve", s.epochs_since_improve},
          {"last_dev_ppl", nullable(s.last_dev_ppl)}};
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& meta, const SltModel<float>& model,
                     const Adam* adam) {
  const json block = {{"tag", meta.tag},
                      {"config", detail::run_config_json(meta.config)},
                      {"vocab", meta.vocab.tokens()},
                      {"state", state_json(meta.state)}};
  const std::string text = block.dump();
  std::string out = "SLTK";
  put_u32(out, kCheckpointVersion);
  put_u32(out, std::uint32_t(text.size()));
  out += text;
  const auto params = model.parameters();
  write_records(out, params, nullptr);
  static const std::vector<std::vector<float>> kNone;
  write_records(out, params, adam ? &adam->first_moments() : &kNone);
  write_records(out, params, adam ? &adam->second_moments() : &kNone);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader in(ss.str());
  if (in.take(4) != "SLTK") throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }

  LoadedCheckpoint ck;
  try {
    const json block = json::parse(in.take(in.u32()));
    ck.meta.tag = block.at("tag").get<std::string>();
    ck.meta.config = detail::run_config_from_json(block.at("config"));
    ck.meta.vocab = Vocabulary::from_tokens(block.at("vocab").get<std::vector<std::string>>());
    const auto& s = block.at("state");
    ck.meta.state.global_step = s.at("global_step").get<std::size_t>();
    ck.meta.state.epoch = s.at("epoch").get<std::size_t>();
    ck.meta.state.best_dev_ppl =
        from_nullable(s.at("best_dev_ppl"), std::numeric_limits<double>::infinity());
    ck.meta.state.epochs_since_improve = s.at("epochs_since_improve").get<std::size_t>();
    ck.meta.state.last_dev_ppl =
        from_nullable(s.at("last_dev_ppl"), std::numeric_limits<double>::quiet_NaN());
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad checkpoint config block: ") + e.what());
  }

  ck.model = std::make_unique<SltModel<float>>(
      ck.meta.config.model_config(ck.meta.vocab.size()), ck.meta.config.seed);
  auto params = ck.model->parameters();
  auto match = [&](const std::vector<Record>& records, const char* what) {
    if (records.size() != params.size()) {
      throw FormatError(std::string(what) + ": " + std::to_string(records.size()) +
                        " records for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].name != params[i].first || records[i].shape != params[i].second.shape()) {
        throw FormatError(std::string(what) + " record " + records[i].name +
                          " does not match parameter " + params[i].first);
      }
    }
  };
  const auto values = read_records(in);
  match(values, "parameters");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::copy(values[i].values.begin(), values[i].values.end(),
              params[i].second.mutable_data().begin());
  }
  for (auto* dst : {&ck.adam_m, &ck.adam_v}) {
    const auto moments = read_records(in);
    if (moments.empty()) continue;
    match(moments, "optimizer state");
    for (const auto& r : moments) dst->push_back(r.values);
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

void restore_adam(Adam& adam, const LoadedCheckpoint& ckpt) {
  if (ckpt.adam_m.empty()) return;
  if (ckpt.adam_m.size() != adam.first_moments().size()) {
    throw FormatError("optimizer state does not match the model");
  }
  adam.first_moments() = ckpt.adam_m;
  adam.second_moments() = ckpt.adam_v;
  adam.set_steps(ckpt.meta.state.global_step);
}

double accumulate_window(const SltModel<float>& model, const Dataset& data,
                         std::span<const Batch> window, double smoothing, SplitMix64* dropout_rng) {
  std::size_t window_tokens = 0;
  for (const auto& b : window) window_tokens += b.token_count();
  double window_loss = 0;
  for (const auto& b : window) {
    const auto clips = data.clips(b.indices);
    for (std::size_t k = 0; k < clips.size(); ++k) {
      const auto& target = data.targets()[b.indices[k]];
      const std::vector<std::uint8_t> mask(target.size(), 1);
      const ForwardContext<float> ctx{dropout_rng != nullptr, dropout_rng, nullptr};
      const auto logits = model.forward(clips[k], shift_right(target), ctx);
      const auto loss = label_smoothed_ce(logits, target, mask, smoothing, double(window_tokens));
      window_loss += loss.item();
      backward(loss);
    }
  }
  return window_loss;
}

TrainResult train_loop(SltModel<float>& model, Adam& adam, const Dataset& train, const Dataset& dev,
                       const TrainOptions& options, TrainState state) {
  const OptimConfig& cfg = options.config.optim;
  cfg.validate();
  if (train.empty()) throw ContractError("training set is empty");
  if (dev.empty() && !options.dev_score) throw ContractError("dev set is empty");

  SplitMix64 order_rng(options.config.seed);
  SplitMix64 dropout_rng(options.config.seed ^ 0x5bd1e995a5a5a5a5ULL);
  const EarlyStopping stopper(cfg.patience);
  const std::size_t d_model = model.config().language.d_model;
  TrainResult result;

  auto checkpoint = [&](const std::string& tag, const fs::path& file) {
    if (options.checkpoint_dir.empty()) return;
    save_checkpoint(options.checkpoint_dir / file, {tag, options.config, options.vocab, state},
                    model, &adam);
  };

  bool halt = false;
  while (!halt && state.epoch < cfg.max_epochs) {
    const auto batches = batch_iter(train.targets(), cfg.batch_size, order_rng);
    std::size_t consumed = 0;
    for (std::size_t start = 0; start < batches.size() && !halt; start += cfg.accum_steps) {
      const std::size_t stop = std::min(batches.size(), start + cfg.accum_steps);
      consumed = stop;
      const std::span<const Batch> window(batches.data() + start, stop - start);
      double window_loss = 0;
      try {
        window_loss = accumulate_window(model, train, window, cfg.smoothing, &dropout_rng);
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(state.global_step + 1) + ": " + e.what());
      }

      const double lr = cfg.lr_scale * noam_lr(state.global_step + 1, d_model, cfg.warmup);
      try {
        adam.step(lr);
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(state.global_step + 1) + ": " + e.what());
      }
      adam.zero_grad();
      ++state.global_step;

      const StepRecord rec{state.global_step, window_loss, lr};
      result.steps.push_back(rec);
      if (options.step_log) *options.step_log << rec.step << '\t' << rec.loss << '\t' << rec.lr << '\n';
      if (options.on_step && options.on_step(model, rec)) halt = true;
      if (options.max_steps && state.global_step >= options.max_steps) halt = true;
    }
    // A halt that lands on the epoch's last step still gets the epoch-end pass.
    if (halt && consumed < batches.size()) break;

    ++state.epoch;
    const double score =
        options.dev_score ? options.dev_score(model, state.epoch) : perplexity(model, dev);
    const bool improved = stopper.update(state, score);
    result.epochs.push_back({state.epoch, score, improved});
    if (options.epoch_log) *options.epoch_log << state.epoch << '\t' << score << '\n';
    if (improved) checkpoint("best", "best.ckpt");
    if (options.periodic_every && state.epoch % options.periodic_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", state.epoch);
      checkpoint("periodic", name);
    }
    if (stopper.should_stop(state)) {
      result.stopped_early = true;
      break;
    }
    if (halt) break;
  }
  result.state = state;
  return result;
}

GradcheckReport check_model_gradients(const ModelConfig& config, const ClipShape& clip,
                                      std::uint64_t seed, const GradcheckOptions& opts) {
  SltModel<double> model(config, seed);
  SplitMix64 rng(seed + 1);
  std::vector<double> voxels(3 * clip.depth * clip.height * clip.width);
  for (auto& v : voxels) v = rng.uniform();
  const TensorD input({3, clip.depth, clip.height, clip.width}, std::move(voxels));

  const std::size_t len = std::min<std::size_t>(4, config.language.max_output_len);
  std::vector<int> target;
  const std::size_t words = config.vocab_size - kNumSpecials;
  for (std::size_t i = 0; i < len; ++i) {
    target.push_back(words ? kNumSpecials + int(rng.below(words)) : kUnkId);
  }
  target.push_back(kEosId);
  const std::vector<std::uint8_t> mask(target.size(), 1);
  const auto inputs = shift_right(target);

  std::vector<TensorD> leaves;
  for (auto& [name, p] : model.parameters()) leaves.push_back(p);
  return gradcheck<double>(
      [&] { return label_smoothed_ce(model.forward(input, inputs), target, mask, 0.1); }, leaves,
      opts);
}

}  // namespace slt
