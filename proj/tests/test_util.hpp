#pragma once

#include <vector>

#include "slt/rng.hpp"
#include "slt/tensor.hpp"

namespace slt::test {

template <class T = float>
BasicTensor<T> random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <class T>
std::vector<T> to_vector(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace slt::test
