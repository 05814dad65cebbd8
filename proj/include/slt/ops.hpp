#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "slt/rng.hpp"
#include "slt/tensor.hpp"

namespace slt {

using Extent3 = std::array<std::size_t, 3>;

// Differentiable primitives. Shapes must match exactly; the only broadcast is
// a bias/gain vector over the last axis (or the channel axis for group_norm).
// Every op throws NumericError if its forward output is not finite.

/// [m,k]x[k,n] -> [m,n], or batched [b,m,k]x[b,k,n] -> [b,m,n].
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Swaps two axes.
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a, std::size_t axis0, std::size_t axis1);

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Elementwise product.
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a + bias, bias broadcast over the last axis.
template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& a, const BasicTensor<T>& bias);

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a);

/// Max-subtracted softmax along `axis` (negative counts from the back).
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis = -1);

/// Log-softmax along the last axis.
template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a);

/// Normalizes each last-axis row to zero mean and unit (population) variance,
/// then applies gain and bias.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, double eps = 1e-5);

/// x is [C, ...]; channels are split into `groups` contiguous groups and each
/// group is normalized over its channels and all trailing positions.
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, std::size_t groups, double eps = 1e-5);

/// Cross-correlation of x [C_in,D,H,W] with kernels [C_out,C_in,kd,kh,kw]
/// over the zero-padded input.
template <class T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, Extent3 stride,
                      Extent3 padding);

/// Max pooling over x [C,D,H,W]; padded cells never win.
template <class T>
BasicTensor<T> max_pool3d(const BasicTensor<T>& input, Extent3 kernel, Extent3 stride,
                          Extent3 padding);

/// Mean over every axis but the first: [C, ...] -> [C].
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

/// Row gather: table [V,d], ids -> [len(ids), d].
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);

/// Sum of all elements -> shape {1}. Accumulates in double.
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a);

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a);

/// Inverted dropout. rate == 0 returns `a` untouched and draws nothing.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, SplitMix64& rng);

/// Output extent of a strided window along one axis; throws DimensionError
/// when the window does not fit.
std::size_t window_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding);

}  // namespace slt
