#include "slt/config.hpp"

#include "config_json.hpp"
#include "slt/errors.hpp"

namespace slt {

void OptimConfig::validate() const {
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw ConfigError("betas must lie in (0,1)");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(smoothing >= 0 && smoothing < 1)) throw ConfigError("smoothing must lie in [0,1)");
  if (warmup == 0 || accum_steps == 0 || batch_size == 0 || patience == 0 || max_epochs == 0) {
    throw ConfigError("warmup, accum_steps, batch_size, patience and max_epochs must be positive");
  }
  if (!(lr_scale > 0)) throw ConfigError("lr_scale must be positive");
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  return {{int(visual.depth), visual.base_channels}, visual.swm, language, vocab_size};
}

void RunConfig::validate() const {
  model_config(kNumSpecials).validate();
  optim.validate();
  if (visual.frame_depth < 2 || visual.height < 4 || visual.width < 4) {
    throw ConfigError("clips need at least 2 frames of 4x4 pixels");
  }
  if (data.max_tokens == 0) throw ConfigError("max_tokens must be positive");
  if (data.max_tokens > language.max_output_len) {
    throw ConfigError("max_tokens exceeds the decoder's max_output_len");
  }
}

namespace detail {

using nlohmann::json;

json run_config_json(const RunConfig& c) {
  return {
      {"visual",
       {{"depth", c.visual.depth},
        {"base_channels", c.visual.base_channels},
        {"swm", c.visual.swm},
        {"frame_depth", c.visual.frame_depth},
        {"height", c.visual.height},
        {"width", c.visual.width}}},
      {"language",
       {{"d_model", c.language.d_model},
        {"n_heads", c.language.n_heads},
        {"n_layers", c.language.n_layers},
        {"d_ffn", c.language.d_ffn},
        {"dropout", c.language.dropout},
        {"max_output_len", c.language.max_output_len}}},
      {"optim",
       {{"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"epsilon", c.optim.epsilon},
        {"weight_decay", c.optim.weight_decay},
        {"smoothing", c.optim.smoothing},
        {"warmup", c.optim.warmup},
        {"accum_steps", c.optim.accum_steps},
        {"batch_size", c.optim.batch_size},
        {"patience", c.optim.patience},
        {"max_epochs", c.optim.max_epochs},
        {"lr_scale", c.optim.lr_scale}}},
      {"data",
       {{"train_manifest", c.data.train_manifest},
        {"dev_manifest", c.data.dev_manifest},
        {"max_tokens", c.data.max_tokens},
        {"workers", c.data.workers}}},
      {"seed", c.seed},
  };
}

namespace {

template <class V>
void take(const json& obj, const std::string& section, const char* key, V& out) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    if constexpr (std::is_unsigned_v<V>) {
      if (!it->is_number_unsigned()) throw ConfigError("");
    }
    out = it->template get<V>();
  } catch (const std::exception&) {
    throw ConfigError("config field " + section + key + " has the wrong type");
  }
}

void reject_unknown(const json& obj, const std::string& section,
                    std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok |= it.key() == k;
    if (!ok) throw ConfigError("unknown config field " + section + it.key());
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, "", {"visual", "language", "optim", "data", "seed"});
  if (j.contains("visual")) {
    const auto& v = j["visual"];
    reject_unknown(v, "visual.",
                   {"depth", "base_channels", "swm", "frame_depth", "height", "width"});
    take(v, "visual.", "depth", c.visual.depth);
    take(v, "visual.", "base_channels", c.visual.base_channels);
    take(v, "visual.", "swm", c.visual.swm);
    take(v, "visual.", "frame_depth", c.visual.frame_depth);
    take(v, "visual.", "height", c.visual.height);
    take(v, "visual.", "width", c.visual.width);
  }
  if (j.contains("language")) {
    const auto& l = j["language"];
    reject_unknown(l, "language.",
                   {"d_model", "n_heads", "n_layers", "d_ffn", "dropout", "max_output_len"});
    take(l, "language.", "d_model", c.language.d_model);
    take(l, "language.", "n_heads", c.language.n_heads);
    take(l, "language.", "n_layers", c.language.n_layers);
    take(l, "language.", "d_ffn", c.language.d_ffn);
    take(l, "language.", "dropout", c.language.dropout);
    take(l, "language.", "max_output_len", c.language.max_output_len);
  }
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    reject_unknown(o, "optim.",
                   {"beta1", "beta2", "epsilon", "weight_decay", "smoothing", "warmup",
                    "accum_steps", "batch_size", "patience", "max_epochs", "lr_scale"});
    take(o, "optim.", "beta1", c.optim.beta1);
    take(o, "optim.", "beta2", c.optim.beta2);
    take(o, "optim.", "epsilon", c.optim.epsilon);
    take(o, "optim.", "weight_decay", c.optim.weight_decay);
    take(o, "optim.", "smoothing", c.optim.smoothing);
    take(o, "optim.", "warmup", c.optim.warmup);
    take(o, "optim.", "accum_steps", c.optim.accum_steps);
    take(o, "optim.", "batch_size", c.optim.batch_size);
    take(o, "optim.", "patience", c.optim.patience);
    take(o, "optim.", "max_epochs", c.optim.max_epochs);
    take(o, "optim.", "lr_scale", c.optim.lr_scale);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data.", {"train_manifest", "dev_manifest", "max_tokens", "workers"});
    take(d, "data.", "train_manifest", c.data.train_manifest);
    take(d, "data.", "dev_manifest", c.data.dev_manifest);
    take(d, "data.", "max_tokens", c.data.max_tokens);
    take(d, "data.", "workers", c.data.workers);
  }
  take(j, "", "seed", c.seed);
  return c;
}

}  // namespace detail

std::string to_json(const RunConfig& config) { return detail::run_config_json(config).dump(2); }

RunConfig parse_run_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return detail::run_config_from_json(j);
}

}  // namespace slt
