#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "slt/config.hpp"
#include "slt/gradcheck.hpp"
#include "slt/model.hpp"

namespace slt {

/// Sum over unmasked rows of -sum_k q(k) log softmax(logits)_k, divided by
/// `normalizer` (the unmasked row count when 0). q puts 1-eps on the target
/// and eps/(V-2) on every other non-PAD id.
template <class T>
BasicTensor<T> label_smoothed_ce(const BasicTensor<T>& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask, double smoothing,
                                 double normalizer = 0.0);

/// Inverse-square-root schedule with linear warmup.
double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup = 4000);

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(NamedTensors<float> params, const OptimConfig& config);

  /// Applies one update from the parameters' accumulated grads. Parameters
  /// without a grad are treated as having a zero gradient.
  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return t_; }
  const NamedTensors<float>& params() const { return params_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  NamedTensors<float> params_;
  OptimConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

/// Clips with EOS-terminated target ids, held in memory or read from disk on
/// demand.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Tensor> clips, std::vector<std::vector<int>> targets);
  Dataset(std::vector<std::string> clip_paths, ClipShape shape,
          std::vector<std::vector<int>> targets, std::size_t workers = 1);

  std::size_t size() const { return targets_.size(); }
  bool empty() const { return targets_.empty(); }
  const std::vector<std::vector<int>>& targets() const { return targets_; }
  std::vector<Tensor> clips(const std::vector<std::size_t>& indices) const;
  Tensor clip(std::size_t i) const;

 private:
  std::vector<Tensor> clips_;
  std::vector<std::string> paths_;
  ClipShape shape_;
  std::size_t workers_ = 1;
  std::vector<std::vector<int>> targets_;
};

struct TeacherForcedScores {
  double perplexity = 0;
  double token_accuracy = 0;
  double mean_nll = 0;
  std::size_t tokens = 0;
};

/// Unsmoothed teacher-forced statistics with dropout off.
TeacherForcedScores teacher_forced_scores(const SltModel<float>& model, const Dataset& data);
double perplexity(const SltModel<float>& model, const Dataset& data);

struct TrainState {
  std::size_t global_step = 0;
  std::size_t epoch = 0;
  double best_dev_ppl = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improve = 0;
  /// Dev perplexity measured at the end of the last finished epoch.
  double last_dev_ppl = std::numeric_limits<double>::quiet_NaN();
};

/// Patience counter on a lower-is-better score.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records one epoch's score; true when it is a new best.
  bool update(TrainState& state, double score) const;
  bool should_stop(const TrainState& state) const {
    return state.epochs_since_improve >= patience_;
  }

 private:
  std::size_t patience_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string tag;
  RunConfig config;
  Vocabulary vocab;
  TrainState state;
};

/// "SLTK", u32 version, u32 length + JSON block (config, vocabulary, state,
/// tag), then parameter records and the Adam first and second moments, each
/// group prefixed by its u32 record count.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& meta,
                     const SltModel<float>& model, const Adam* adam = nullptr);

struct LoadedCheckpoint {
  Checkpoint meta;
  std::unique_ptr<SltModel<float>> model;
  std::vector<std::vector<float>> adam_m, adam_v;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Restores Adam moments and step count from a loaded checkpoint.
void restore_adam(Adam& adam, const LoadedCheckpoint& ckpt);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double dev_ppl = 0;
  bool improved = false;
};

struct TrainOptions {
  RunConfig config;
  Vocabulary vocab;
  /// Checkpoints are skipped when empty.
  std::filesystem::path checkpoint_dir;
  /// Writes epoch_NNNN.ckpt every this many epochs; 0 disables.
  std::size_t periodic_every = 0;
  /// TSV sinks (step, loss, lr) and (epoch, dev_ppl); may be null.
  std::ostream* step_log = nullptr;
  std::ostream* epoch_log = nullptr;
  /// Replaces dev perplexity as the early-stopping score when set.
  std::function<double(const SltModel<float>&, std::size_t epoch)> dev_score;
  /// Called after every optimizer step; returning true ends training.
  std::function<bool(const SltModel<float>&, const StepRecord&)> on_step;
  /// Hard cap on optimizer steps; 0 means none.
  std::size_t max_steps = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  bool stopped_early = false;
};

/// Backpropagates the summed smoothed loss of every sentence in `window`,
/// each divided by the window's target token count, and returns that loss.
/// Gradients accumulate into the parameters. Dropout runs when a generator
/// is given.
double accumulate_window(const SltModel<float>& model, const Dataset& data,
                         std::span<const Batch> window, double smoothing,
                         SplitMix64* dropout_rng = nullptr);

/// Per epoch: shuffle, split into batches; every accum_steps batches (and at
/// the end of the epoch) apply one Adam step. Each sentence's smoothed loss is
/// divided by the number of target tokens in its accumulation window, so the
/// accumulated gradient equals that of the window as one batch.
TrainResult train_loop(SltModel<float>& model, Adam& adam, const Dataset& train, const Dataset& dev,
                       const TrainOptions& options, TrainState state = {});

/// Finite-difference check of d(smoothed loss)/d(parameters) for a randomly
/// initialised model in double precision on one random clip and target.
GradcheckReport check_model_gradients(const ModelConfig& config, const ClipShape& clip,
                                      std::uint64_t seed, const GradcheckOptions& opts);

}  // namespace slt
