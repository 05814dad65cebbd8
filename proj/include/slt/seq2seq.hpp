#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "slt/nn.hpp"
#include "slt/vocab.hpp"

namespace slt {

/// Transformer "base" widths with three encoder and three decoder layers.
struct TransformerConfig {
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t n_layers = 3;
  std::size_t d_ffn = 2048;
  double dropout = 0.1;
  /// Upper bound on generated tokens (BOS excluded).
  std::size_t max_output_len = 50;

  void validate() const;
};

/// Sinusoidal table [length, d_model]: sin at even columns, cos at odd ones.
template <class T>
BasicTensor<T> positional_encoding(std::size_t length, std::size_t d_model);

/// Per-call switches. Dropout is active only when `training` is set and a
/// generator is supplied. When `attention_trace` is set every attention
/// probability tensor [heads, queries, keys] is appended to it.
template <class T>
struct ForwardContext {
  bool training = false;
  SplitMix64* rng = nullptr;
  std::vector<BasicTensor<T>>* attention_trace = nullptr;

  double dropout_rate(double configured) const { return training && rng ? configured : 0.0; }
};

template <class T>
struct AttentionParams {
  Linear<T> query, key, value, output;
};

template <class T>
struct EncoderLayer {
  AttentionParams<T> self_attention;
  LayerNormParams<T> norm1;
  Linear<T> ffn_in, ffn_out;
  LayerNormParams<T> norm2;
};

template <class T>
struct DecoderLayer {
  AttentionParams<T> self_attention;
  LayerNormParams<T> norm1;
  AttentionParams<T> cross_attention;
  LayerNormParams<T> norm2;
  Linear<T> ffn_in, ffn_out;
  LayerNormParams<T> norm3;
};

/// Post-norm encoder-decoder over a fixed-length source sequence.
template <class T>
class Transformer {
 public:
  /// `source_len` is the number of encoder input rows (the SWM value).
  Transformer(const TransformerConfig& config, std::size_t source_len, std::size_t vocab_size,
              SplitMix64& rng);

  /// source [source_len, d_model] (positions already encoded) -> memory.
  BasicTensor<T> encode(const BasicTensor<T>& source, const ForwardContext<T>& ctx = {}) const;

  /// Teacher-forced decoder: inputs start with BOS; causal self-attention.
  /// Returns logits [len(inputs), V]. At most max_output_len + 1 positions.
  BasicTensor<T> decode(std::span<const int> inputs, const BasicTensor<T>& memory,
                        const ForwardContext<T>& ctx = {}) const;

  /// Argmax decoding from BOS (ties resolve to the lowest id); stops at EOS
  /// or after max_output_len tokens. BOS and EOS are not returned.
  std::vector<int> greedy_decode(const BasicTensor<T>& memory) const;

  const TransformerConfig& config() const { return config_; }
  std::size_t source_len() const { return source_len_; }
  std::size_t vocab_size() const { return vocab_size_; }

  std::vector<EncoderLayer<T>>& encoder_layers() { return encoder_; }
  std::vector<DecoderLayer<T>>& decoder_layers() { return decoder_; }
  Linear<T>& output_projection() { return generator_; }
  BasicTensor<T>& target_embedding() { return embedding_; }

  void collect(NamedTensors<T>& out, const std::string& prefix) const;

 private:
  BasicTensor<T> attend(const AttentionParams<T>& p, const BasicTensor<T>& queries,
                        const BasicTensor<T>& keys, bool causal,
                        const ForwardContext<T>& ctx) const;
  BasicTensor<T> feed_forward(const Linear<T>& in, const Linear<T>& out, const BasicTensor<T>& x,
                              const ForwardContext<T>& ctx) const;
  BasicTensor<T> drop(const BasicTensor<T>& x, const ForwardContext<T>& ctx) const;

  TransformerConfig config_;
  std::size_t source_len_;
  std::size_t vocab_size_;
  BasicTensor<T> embedding_;
  std::vector<EncoderLayer<T>> encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  Linear<T> generator_;
};

/// Surface sentence from generated ids: specials (PAD, BOS, EOS, UNK) are
/// dropped and the remaining tokens joined with single spaces.
std::string postprocess_output(std::span<const int> ids, const Vocabulary& vocab);

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace slt
