#include "slt/vision.hpp"

#include <algorithm>
#include <cmath>

namespace slt {

void ResNetConfig::validate() const {
  if (depth != 10 && depth != 34 && depth != 50) {
    throw ConfigError("ResNet depth must be 10, 34 or 50, got " + std::to_string(depth));
  }
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
}

BlockType ResNetConfig::block_type() const {
  validate();
  return depth == 50 ? BlockType::kBottleneck : BlockType::kBasic;
}

std::array<std::size_t, 4> ResNetConfig::stage_counts() const {
  validate();
  if (depth == 10) return {1, 1, 1, 1};
  return {3, 4, 6, 3};
}

std::size_t ResNetConfig::feature_size() const {
  return (block_type() == BlockType::kBottleneck ? 32 : 8) * base_channels;
}

std::size_t norm_groups(std::size_t channels) {
  std::size_t g = std::clamp<std::size_t>(channels / 4, 1, 32);
  while (channels % g != 0) --g;
  return g;
}

template <class T>
BasicTensor<T> ResNet3D<T>::ConvUnit::operator()(const BasicTensor<T>& x) const {
  return group_norm(conv3d(x, kernel, stride, padding), gain, bias, groups);
}

template <class T>
typename ResNet3D<T>::ConvUnit ResNet3D<T>::make_unit(std::size_t in, std::size_t out,
                                                      std::size_t kernel, std::size_t stride,
                                                      SplitMix64& rng) {
  // He initialization over fan-out, as used for ReLU convolutional nets.
  const double fan_out = double(out * kernel * kernel * kernel);
  ConvUnit unit{normal_init<T>({out, in, kernel, kernel, kernel}, std::sqrt(2.0 / fan_out), rng),
                {stride, stride, stride},
                {kernel / 2, kernel / 2, kernel / 2},
                constant_param<T>({out}, T{1}),
                constant_param<T>({out}, T{0}),
                norm_groups(out)};
  return unit;
}

template <class T>
ResNet3D<T>::ResNet3D(const ResNetConfig& config, SplitMix64& rng) : config_(config) {
  config_.validate();
  const std::size_t base = config_.base_channels;
  stem_ = make_unit(kChannels, base, 7, 1, rng);
  stem_.stride = {1, 2, 2};

  const bool bottleneck = config_.block_type() == BlockType::kBottleneck;
  const std::size_t expansion = bottleneck ? 4 : 1;
  const auto counts = config_.stage_counts();
  std::size_t in = base;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t width = base << s;
    const std::size_t out = width * expansion;
    std::vector<Block> stage;
    for (std::size_t b = 0; b < counts[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      Block block;
      if (bottleneck) {
        block.convs.push_back(make_unit(in, width, 1, 1, rng));
        block.convs.push_back(make_unit(width, width, 3, stride, rng));
        block.convs.push_back(make_unit(width, out, 1, 1, rng));
      } else {
        block.convs.push_back(make_unit(in, width, 3, stride, rng));
        block.convs.push_back(make_unit(width, width, 3, 1, rng));
      }
      if (stride != 1 || in != out) block.shortcut = make_unit(in, out, 1, stride, rng);
      stage.push_back(std::move(block));
      in = out;
    }
    stages_.push_back(std::move(stage));
  }
}

template <class T>
BasicTensor<T> ResNet3D<T>::run_block(const Block& block, const BasicTensor<T>& x) const {
  BasicTensor<T> h = x;
  for (std::size_t i = 0; i < block.convs.size(); ++i) {
    h = block.convs[i](h);
    if (i + 1 < block.convs.size()) h = relu(h);
  }
  const BasicTensor<T> skip = block.shortcut ? (*block.shortcut)(x) : x;
  return relu(add(h, skip));
}

template <class T>
BasicTensor<T> ResNet3D<T>::forward(const BasicTensor<T>& clip) const {
  if (clip.rank() != 4 || clip.dim(0) != kChannels) {
    throw DimensionError("ResNet3D expects a clip [3,D,H,W], got " + shape_str(clip.shape()));
  }
  if (clip.dim(1) < kMinDepth || clip.dim(2) < kMinSpatial || clip.dim(3) < kMinSpatial) {
    throw DimensionError("clip " + shape_str(clip.shape()) +
                         " is smaller than the stem and pooling windows");
  }
  BasicTensor<T> h = relu(stem_(clip));
  h = max_pool3d(h, {3, 3, 3}, {2, 2, 2}, {1, 1, 1});
  for (const auto& stage : stages_) {
    for (const auto& block : stage) h = run_block(block, h);
  }
  return global_avg_pool(h);
}

template <class T>
void ResNet3D<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
  auto add_unit = [&](const ConvUnit& u, const std::string& name) {
    out.emplace_back(name + ".kernel", u.kernel);
    out.emplace_back(name + ".norm.gain", u.gain);
    out.emplace_back(name + ".norm.bias", u.bias);
  };
  add_unit(stem_, prefix + ".stem");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string name = prefix + ".layer" + std::to_string(s + 1) + "." + std::to_string(b);
      const Block& block = stages_[s][b];
      for (std::size_t c = 0; c < block.convs.size(); ++c) {
        add_unit(block.convs[c], name + ".conv" + std::to_string(c + 1));
      }
      if (block.shortcut) add_unit(*block.shortcut, name + ".shortcut");
    }
  }
}

template <class T>
std::size_t ResNet3D<T>::parameter_count() const {
  NamedTensors<T> params;
  collect(params, "visual");
  return element_count(params);
}

template <class T>
BasicTensor<T> swm_split(const BasicTensor<T>& feature, std::size_t swm) {
  if (feature.rank() != 1) {
    throw DimensionError("SWM expects a feature vector, got " + shape_str(feature.shape()));
  }
  if (swm == 0 || feature.size() % swm != 0) {
    throw ConfigError("feature size " + std::to_string(feature.size()) +
                      " is not divisible by SWM " + std::to_string(swm));
  }
  return reshape(feature, {swm, feature.size() / swm});
}

template <class T>
BasicTensor<T> swm_convert(const BasicTensor<T>& feature, std::size_t swm,
                           const Linear<T>& projection) {
  const BasicTensor<T> chunks = swm_split(feature, swm);
  if (projection.weight.rank() != 2 || projection.weight.dim(0) != chunks.dim(1)) {
    throw DimensionError("SWM projection " + shape_str(projection.weight.shape()) +
                         " does not accept chunks of length " + std::to_string(chunks.dim(1)));
  }
  return projection(chunks);
}

template class ResNet3D<float>;
template class ResNet3D<double>;
template BasicTensor<float> swm_split(const BasicTensor<float>&, std::size_t);
template BasicTensor<double> swm_split(const BasicTensor<double>&, std::size_t);
template BasicTensor<float> swm_convert(const BasicTensor<float>&, std::size_t,
                                        const Linear<float>&);
template BasicTensor<double> swm_convert(const BasicTensor<double>&, std::size_t,
                                         const Linear<double>&);

}  // namespace slt
