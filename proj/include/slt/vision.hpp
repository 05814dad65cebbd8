#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "slt/nn.hpp"

namespace slt {

enum class BlockType { kBasic, kBottleneck };

/// Depth selects block type and stage layout: 10 -> basic [1,1,1,1],
/// 34 -> basic [3,4,6,3], 50 -> bottleneck [3,4,6,3].
struct ResNetConfig {
  int depth = 50;
  std::size_t base_channels = 64;

  void validate() const;
  BlockType block_type() const;
  std::array<std::size_t, 4> stage_counts() const;
  /// Length of the pooled clip feature: 8*base (basic) or 32*base (bottleneck).
  std::size_t feature_size() const;
};

/// Number of normalization groups used for a layer with `channels` channels:
/// the largest divisor of `channels` not above min(32, channels / 4).
std::size_t norm_groups(std::size_t channels);

/// Spatio-temporal 3D ResNet mapping a clip [3,D,H,W] to one feature vector.
///
/// Stem: 7x7x7 convolution (temporal stride 1, spatial stride 2), group norm,
/// ReLU, 3x3x3 max-pool with stride 2. Stages 2-4 open with a stride-2 block.
/// Shortcuts that change shape use a strided 1x1x1 projection. The output is
/// the average over all remaining positions.
template <class T>
class ResNet3D {
 public:
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kMinDepth = 2;
  static constexpr std::size_t kMinSpatial = 4;

  ResNet3D(const ResNetConfig& config, SplitMix64& rng);

  /// clip [3,D,H,W] -> feature [F].
  BasicTensor<T> forward(const BasicTensor<T>& clip) const;

  const ResNetConfig& config() const { return config_; }
  void collect(NamedTensors<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

  /// The stem convolution kernels [base,3,7,7,7].
  const BasicTensor<T>& stem_kernel() const { return stem_.kernel; }

 private:
  struct ConvUnit {
    BasicTensor<T> kernel;
    Extent3 stride;
    Extent3 padding;
    BasicTensor<T> gain;
    BasicTensor<T> bias;
    std::size_t groups;

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  };
  struct Block {
    std::vector<ConvUnit> convs;
    std::optional<ConvUnit> shortcut;
  };

  static ConvUnit make_unit(std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, SplitMix64& rng);
  BasicTensor<T> run_block(const Block& block, const BasicTensor<T>& x) const;

  ResNetConfig config_;
  ConvUnit stem_;
  std::vector<std::vector<Block>> stages_;
};

/// Splits feature [F] into `swm` contiguous chunks -> [swm, F/swm].
template <class T>
BasicTensor<T> swm_split(const BasicTensor<T>& feature, std::size_t swm);

/// Sentence-to-words mapping: splits the clip feature into `swm` chunks and
/// maps each through the shared projection -> [swm, d_model].
template <class T>
BasicTensor<T> swm_convert(const BasicTensor<T>& feature, std::size_t swm,
                           const Linear<T>& projection);

extern template class ResNet3D<float>;
extern template class ResNet3D<double>;

}  // namespace slt
