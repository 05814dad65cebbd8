#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "slt/ops.hpp"
#include "slt/rng.hpp"
#include "slt/tensor.hpp"

namespace slt {

template <class T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <class T>
BasicTensor<T> normal_init(Shape shape, double stddev, SplitMix64& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> uniform_init(Shape shape, double bound, SplitMix64& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
BasicTensor<T> constant_param(Shape shape, T value) {
  return BasicTensor<T>::full(std::move(shape), value, true);
}

/// y = x W + b with W stored [in, out].
template <class T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  static Linear xavier(std::size_t in, std::size_t out, SplitMix64& rng) {
    const double bound = std::sqrt(6.0 / double(in + out));
    return {uniform_init<T>({in, out}, bound, rng), constant_param<T>({out}, T{0})};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return add_bias(matmul(x, weight), bias);
  }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNormParams {
  BasicTensor<T> gain;
  BasicTensor<T> bias;

  static LayerNormParams unit(std::size_t width) {
    return {constant_param<T>({width}, T{1}), constant_param<T>({width}, T{0})};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
std::size_t element_count(const NamedTensors<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

}  // namespace slt
