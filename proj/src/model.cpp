#include "slt/model.hpp"

namespace slt {

void ModelConfig::validate() const {
  visual.validate();
  language.validate();
  const std::size_t feature = visual.feature_size();
  if (swm == 0 || feature % swm != 0) {
    throw ConfigError("visual feature size " + std::to_string(feature) +
                      " is not divisible by SWM " + std::to_string(swm));
  }
  if (vocab_size < std::size_t(kNumSpecials)) {
    throw ConfigError("vocabulary must at least hold the special tokens");
  }
}

template <class T>
SltModel<T>::SltModel(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      init_rng_(seed),
      visual_(config_.visual, init_rng_),
      projection_(Linear<T>::xavier(config_.visual.feature_size() / config_.swm,
                                    config_.language.d_model, init_rng_)),
      language_(config_.language, config_.swm, config_.vocab_size, init_rng_) {}

template <class T>
BasicTensor<T> SltModel<T>::encode(const BasicTensor<T>& clip, const ForwardContext<T>& ctx) const {
  const auto feature = visual_.forward(clip);
  auto source = swm_convert(feature, config_.swm, projection_);
  source = add(source, positional_encoding<T>(config_.swm, config_.language.d_model));
  const double rate = ctx.dropout_rate(config_.language.dropout);
  if (rate > 0.0) source = dropout(source, rate, *ctx.rng);
  return language_.encode(source, ctx);
}

template <class T>
BasicTensor<T> SltModel<T>::forward(const BasicTensor<T>& clip, std::span<const int> decoder_inputs,
                                    const ForwardContext<T>& ctx) const {
  return language_.decode(decoder_inputs, encode(clip, ctx), ctx);
}

template <class T>
std::vector<int> SltModel<T>::translate(const BasicTensor<T>& clip) const {
  NoGradGuard no_grad;
  return language_.greedy_decode(encode(clip));
}

template <class T>
NamedTensors<T> SltModel<T>::parameters() const {
  NamedTensors<T> out;
  visual_.collect(out, "visual");
  projection_.collect(out, "swm_projection");
  language_.collect(out, "language");
  return out;
}

std::vector<int> shift_right(std::span<const int> targets) {
  std::vector<int> inputs = {kBosId};
  if (!targets.empty()) inputs.insert(inputs.end(), targets.begin(), targets.end() - 1);
  return inputs;
}

template class SltModel<float>;
template class SltModel<double>;

}  // namespace slt
