#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "slt/data.hpp"
#include "slt/model.hpp"

namespace slt {

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.001;
  double smoothing = 0.1;
  std::size_t warmup = 4000;
  std::size_t accum_steps = 32;
  std::size_t batch_size = 10;
  std::size_t patience = 14;
  std::size_t max_epochs = 1000;
  /// Multiplier on the warmup schedule.
  double lr_scale = 1.0;

  void validate() const;
  std::size_t effective_batch() const { return accum_steps * batch_size; }
};

struct VisualSection {
  std::size_t depth = 50;
  std::size_t base_channels = 64;
  std::size_t swm = 32;
  std::size_t frame_depth = 100;
  std::size_t height = 224;
  std::size_t width = 224;
};

struct DataSection {
  std::string train_manifest;
  std::string dev_manifest;
  std::size_t max_tokens = 50;
  std::size_t workers = 5;
};

/// Everything needed to reproduce a run. Defaults are the full-scale setup.
struct RunConfig {
  VisualSection visual;
  TransformerConfig language;
  OptimConfig optim;
  DataSection data;
  std::uint64_t seed = 1;

  ModelConfig model_config(std::size_t vocab_size) const;
  ClipShape clip_shape() const { return {visual.frame_depth, visual.height, visual.width}; }
  void validate() const;
};

/// Pretty-printed JSON with every field present.
std::string to_json(const RunConfig& config);

/// Missing fields keep their defaults; unknown keys and ill-typed values are
/// ConfigError.
RunConfig parse_run_config(std::string_view json);

}  // namespace slt
