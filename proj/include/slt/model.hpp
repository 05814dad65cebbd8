#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slt/seq2seq.hpp"
#include "slt/vision.hpp"

namespace slt {

struct ModelConfig {
  ResNetConfig visual;
  std::size_t swm = 32;
  TransformerConfig language;
  std::size_t vocab_size = kNumSpecials;

  void validate() const;
};

/// The full translator: 3D ResNet -> SWM split + projection -> Transformer.
/// One graph spans both blocks, so a loss on the decoder output reaches the
/// first visual convolution.
template <class T>
class SltModel {
 public:
  SltModel(const ModelConfig& config, std::uint64_t seed);

  /// clip [3,D,H,W] -> encoder memory [swm, d_model].
  BasicTensor<T> encode(const BasicTensor<T>& clip, const ForwardContext<T>& ctx = {}) const;

  /// Teacher-forced logits [len(decoder_inputs), V].
  BasicTensor<T> forward(const BasicTensor<T>& clip, std::span<const int> decoder_inputs,
                         const ForwardContext<T>& ctx = {}) const;

  std::vector<int> translate(const BasicTensor<T>& clip) const;

  NamedTensors<T> parameters() const;
  const ModelConfig& config() const { return config_; }

  ResNet3D<T>& visual() { return visual_; }
  const ResNet3D<T>& visual() const { return visual_; }
  Linear<T>& swm_projection() { return projection_; }
  Transformer<T>& language() { return language_; }
  const Transformer<T>& language() const { return language_; }

 private:
  ModelConfig config_;
  SplitMix64 init_rng_;
  ResNet3D<T> visual_;
  Linear<T> projection_;
  Transformer<T> language_;
};

/// [BOS] + targets without their final token: the teacher-forcing input for
/// an EOS-terminated target sequence.
std::vector<int> shift_right(std::span<const int> targets);

extern template class SltModel<float>;
extern template class SltModel<double>;

}  // namespace slt
