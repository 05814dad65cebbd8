#include "slt/seq2seq.hpp"

#include <cmath>

namespace slt {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for sinusoidal positions");
  if (n_layers == 0 || d_ffn == 0) throw ConfigError("n_layers and d_ffn must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  if (max_output_len == 0) throw ConfigError("max_output_len must be at least 1");
}

template <class T>
BasicTensor<T> positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) {
    throw ConfigError("positional encoding needs an even d_model, got " + std::to_string(d_model));
  }
  if (length == 0) throw ConfigError("positional encoding length must be at least 1");
  std::vector<T> table(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = double(pos) / std::pow(10000.0, double(2 * i) / double(d_model));
      table[pos * d_model + 2 * i] = static_cast<T>(std::sin(angle));
      table[pos * d_model + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return BasicTensor<T>({length, d_model}, std::move(table));
}

namespace {

template <class T>
AttentionParams<T> make_attention(std::size_t d, SplitMix64& rng) {
  return {Linear<T>::xavier(d, d, rng), Linear<T>::xavier(d, d, rng),
          Linear<T>::xavier(d, d, rng), Linear<T>::xavier(d, d, rng)};
}

template <class T>
void collect_attention(const AttentionParams<T>& a, NamedTensors<T>& out, const std::string& p) {
  a.query.collect(out, p + ".query");
  a.key.collect(out, p + ".key");
  a.value.collect(out, p + ".value");
  a.output.collect(out, p + ".output");
}

// Added to masked attention scores; exp() of it underflows to exactly zero.
constexpr double kMaskedScore = -1e9;

}  // namespace

template <class T>
Transformer<T>::Transformer(const TransformerConfig& config, std::size_t source_len,
                            std::size_t vocab_size, SplitMix64& rng)
    : config_(config), source_len_(source_len), vocab_size_(vocab_size) {
  config_.validate();
  if (source_len_ == 0) throw ConfigError("source length must be positive");
  if (vocab_size_ < std::size_t(kNumSpecials)) {
    throw ConfigError("vocabulary must at least hold the special tokens");
  }
  const std::size_t d = config_.d_model;
  embedding_ = normal_init<T>({vocab_size_, d}, 1.0 / std::sqrt(double(d)), rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    encoder_.push_back({make_attention<T>(d, rng), LayerNormParams<T>::unit(d),
                        Linear<T>::xavier(d, config_.d_ffn, rng),
                        Linear<T>::xavier(config_.d_ffn, d, rng), LayerNormParams<T>::unit(d)});
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    decoder_.push_back({make_attention<T>(d, rng), LayerNormParams<T>::unit(d),
                        make_attention<T>(d, rng), LayerNormParams<T>::unit(d),
                        Linear<T>::xavier(d, config_.d_ffn, rng),
                        Linear<T>::xavier(config_.d_ffn, d, rng), LayerNormParams<T>::unit(d)});
  }
  generator_ = Linear<T>::xavier(d, vocab_size_, rng);
}

template <class T>
BasicTensor<T> Transformer<T>::drop(const BasicTensor<T>& x, const ForwardContext<T>& ctx) const {
  const double rate = ctx.dropout_rate(config_.dropout);
  return rate > 0.0 ? dropout(x, rate, *ctx.rng) : x;
}

template <class T>
BasicTensor<T> Transformer<T>::attend(const AttentionParams<T>& p, const BasicTensor<T>& queries,
                                      const BasicTensor<T>& keys, bool causal,
                                      const ForwardContext<T>& ctx) const {
  const std::size_t heads = config_.n_heads;
  const std::size_t head_dim = config_.d_model / heads;
  const std::size_t tq = queries.dim(0), tk = keys.dim(0);
  auto split_heads = [&](const BasicTensor<T>& x, std::size_t len) {
    return transpose(reshape(x, {len, heads, head_dim}), 0, 1);  // [h, len, dh]
  };
  const auto q = split_heads(p.query(queries), tq);
  const auto k = split_heads(p.key(keys), tk);
  const auto v = split_heads(p.value(keys), tk);
  auto scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(double(head_dim)));
  if (causal) {
    std::vector<T> mask(heads * tq * tk, T{0});
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = i + 1; j < tk; ++j) mask[(h * tq + i) * tk + j] = T(kMaskedScore);
    scores = add(scores, BasicTensor<T>({heads, tq, tk}, std::move(mask)));
  }
  const auto probs = softmax(scores, -1);
  if (ctx.attention_trace) ctx.attention_trace->push_back(probs);
  const auto context = reshape(transpose(matmul(probs, v), 0, 1), {tq, config_.d_model});
  return p.output(context);
}

template <class T>
BasicTensor<T> Transformer<T>::feed_forward(const Linear<T>& in, const Linear<T>& out,
                                            const BasicTensor<T>& x,
                                            const ForwardContext<T>& ctx) const {
  return out(drop(relu(in(x)), ctx));
}

template <class T>
BasicTensor<T> Transformer<T>::encode(const BasicTensor<T>& source,
                                      const ForwardContext<T>& ctx) const {
  if (source.rank() != 2 || source.dim(0) != source_len_ || source.dim(1) != config_.d_model) {
    throw DimensionError("encoder expects [" + std::to_string(source_len_) + "," +
                         std::to_string(config_.d_model) + "], got " + shape_str(source.shape()));
  }
  BasicTensor<T> x = source;
  for (const auto& layer : encoder_) {
    x = layer.norm1(add(x, drop(attend(layer.self_attention, x, x, false, ctx), ctx)));
    x = layer.norm2(add(x, drop(feed_forward(layer.ffn_in, layer.ffn_out, x, ctx), ctx)));
  }
  return x;
}

template <class T>
BasicTensor<T> Transformer<T>::decode(std::span<const int> inputs, const BasicTensor<T>& memory,
                                      const ForwardContext<T>& ctx) const {
  if (inputs.empty() || inputs.size() > config_.max_output_len + 1) {
    throw ContractError("decoder input length " + std::to_string(inputs.size()) +
                        " outside [1, " + std::to_string(config_.max_output_len + 1) + "]");
  }
  if (memory.rank() != 2 || memory.dim(0) != source_len_ || memory.dim(1) != config_.d_model) {
    throw DimensionError("encoder memory must be [" + std::to_string(source_len_) + "," +
                         std::to_string(config_.d_model) + "], got " + shape_str(memory.shape()));
  }
  const std::size_t len = inputs.size();
  const std::size_t d = config_.d_model;
  BasicTensor<T> x = add(scale(embedding(embedding_, inputs), std::sqrt(double(d))),
                         positional_encoding<T>(len, d));
  x = drop(x, ctx);
  for (const auto& layer : decoder_) {
    x = layer.norm1(add(x, drop(attend(layer.self_attention, x, x, true, ctx), ctx)));
    x = layer.norm2(add(x, drop(attend(layer.cross_attention, x, memory, false, ctx), ctx)));
    x = layer.norm3(add(x, drop(feed_forward(layer.ffn_in, layer.ffn_out, x, ctx), ctx)));
  }
  return generator_(x);
}

template <class T>
std::vector<int> Transformer<T>::greedy_decode(const BasicTensor<T>& memory) const {
  NoGradGuard no_grad;
  std::vector<int> ids = {kBosId};
  while (ids.size() <= config_.max_output_len) {
    const auto logits = decode(ids, memory);
    const T* last = logits.data().data() + (ids.size() - 1) * vocab_size_;
    int best = 0;
    for (std::size_t v = 1; v < vocab_size_; ++v) {
      if (last[v] > last[best]) best = int(v);
    }
    if (best == kEosId) break;
    ids.push_back(best);
  }
  return {ids.begin() + 1, ids.end()};
}

template <class T>
void Transformer<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".embedding", embedding_);
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const std::string p = prefix + ".encoder." + std::to_string(l);
    const auto& layer = encoder_[l];
    collect_attention(layer.self_attention, out, p + ".self_attention");
    layer.norm1.collect(out, p + ".norm1");
    layer.ffn_in.collect(out, p + ".ffn_in");
    layer.ffn_out.collect(out, p + ".ffn_out");
    layer.norm2.collect(out, p + ".norm2");
  }
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const std::string p = prefix + ".decoder." + std::to_string(l);
    const auto& layer = decoder_[l];
    collect_attention(layer.self_attention, out, p + ".self_attention");
    layer.norm1.collect(out, p + ".norm1");
    collect_attention(layer.cross_attention, out, p + ".cross_attention");
    layer.norm2.collect(out, p + ".norm2");
    layer.ffn_in.collect(out, p + ".ffn_in");
    layer.ffn_out.collect(out, p + ".ffn_out");
    layer.norm3.collect(out, p + ".norm3");
  }
  generator_.collect(out, prefix + ".generator");
}

std::string postprocess_output(std::span<const int> ids, const Vocabulary& vocab) {
  std::string sentence;
  for (const int id : ids) {
    if (Vocabulary::is_special(id)) continue;
    if (!sentence.empty()) sentence += ' ';
    sentence += vocab.token(id);
  }
  return sentence;
}

template class Transformer<float>;
template class Transformer<double>;
template BasicTensor<float> positional_encoding(std::size_t, std::size_t);
template BasicTensor<double> positional_encoding(std::size_t, std::size_t);

}  // namespace slt
