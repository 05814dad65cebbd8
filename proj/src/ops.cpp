#include "slt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "blas.hpp"

namespace slt {
namespace {

template <class T>
using NodeRef = Node<T>&;

template <class T>
bool recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const BasicTensor<T>* t) { return t->requires_grad(); });
}

template <class T>
void check_finite(std::string_view op, const std::vector<T>& values) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

/// Wraps a computed value into a tensor, attaching inputs and the backward
/// rule only when the result participates in differentiation.
template <class T>
BasicTensor<T> emit(std::string_view op, Shape shape, std::vector<T> value,
                    std::initializer_list<const BasicTensor<T>*> inputs,
                    std::function<void(Node<T>&)> backward_fn) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (recording<T>(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

/// Grad buffer of input `i`, or nullptr when that input is a constant.
template <class T>
T* input_grad(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? in.grad_data() : nullptr;
}

template <class T>
const std::vector<T>& input_value(Node<T>& self, std::size_t i) {
  return self.inputs[i]->value;
}

void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t resolve_axis(int axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

/// Copies `src` (shape `shape`) into the layout with axes a0/a1 swapped.
template <class T>
void swap_axes(const T* src, T* dst, const Shape& shape, std::size_t a0, std::size_t a1,
               bool accumulate) {
  const std::size_t rank = shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * shape[i];
  Shape out_shape = shape;
  std::swap(out_shape[a0], out_shape[a1]);
  // Stride in the source for each output axis.
  std::vector<std::size_t> walk = in_strides;
  std::swap(walk[a0], walk[a1]);

  std::vector<std::size_t> index(rank, 0);
  const std::size_t n = numel(shape);
  std::size_t offset = 0;
  for (std::size_t out = 0; out < n; ++out) {
    if (accumulate) {
      dst[out] += src[offset];
    } else {
      dst[out] = src[offset];
    }
    for (std::size_t ax = rank; ax-- > 0;) {
      offset += walk[ax];
      if (++index[ax] < out_shape[ax]) break;
      offset -= walk[ax] * out_shape[ax];
      index[ax] = 0;
    }
  }
}

}  // namespace

std::size_t window_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  if (stride == 0) throw DimensionError("stride must be positive");
  if (kernel == 0 || kernel > in + 2 * padding) {
    throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool batched = a.rank() == 3;
  if ((a.rank() != 2 && a.rank() != 3) || b.rank() != a.rank()) {
    throw DimensionError("matmul expects two rank-2 or two rank-3 tensors, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t m = a.dim(off), k = a.dim(off + 1), n = b.dim(off + 1);
  if (b.dim(off) != k || (batched && b.dim(0) != batch)) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, int(m), int(n), int(k), T{1}, a.data().data() + i * m * k, int(k),
                 b.data().data() + i * k * n, int(n), T{0}, out.data() + i * m * n, int(n));
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return emit<T>("matmul", std::move(shape), std::move(out), {&a, &b},
                 [batch, m, k, n](Node<T>& self) {
                   const T* dc = self.grad.data();
                   const T* av = input_value(self, 0).data();
                   const T* bv = input_value(self, 1).data();
                   if (T* da = input_grad(self, 0)) {
                     for (std::size_t i = 0; i < batch; ++i) {
                       detail::gemm(false, true, int(m), int(k), int(n), T{1}, dc + i * m * n,
                                    int(n), bv + i * k * n, int(n), T{1}, da + i * m * k, int(k));
                     }
                   }
                   if (T* db = input_grad(self, 1)) {
                     for (std::size_t i = 0; i < batch; ++i) {
                       detail::gemm(true, false, int(k), int(n), int(m), T{1}, av + i * m * k,
                                    int(k), dc + i * m * n, int(n), T{1}, db + i * k * n, int(n));
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= a.rank() || axis1 >= a.rank()) {
    throw DimensionError("transpose axes out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  std::vector<T> out(a.size());
  swap_axes(a.data().data(), out.data(), a.shape(), axis0, axis1, false);
  return emit<T>("transpose", out_shape, std::move(out), {&a},
                 [out_shape, axis0, axis1](Node<T>& self) {
                   swap_axes(self.grad.data(), input_grad(self, 0), out_shape, axis0, axis1, true);
                 });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return emit<T>("reshape", std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    T* da = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return emit<T>("add", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* d = input_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
      }
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return emit<T>("sub", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (T* d = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
    if (T* d = input_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return emit<T>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const auto& av = input_value(self, 0);
    const auto& bv = input_value(self, 1);
    if (T* d = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
    }
    if (T* d = input_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& a, const BasicTensor<T>& bias) {
  const std::size_t cols = a.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != cols) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(a.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + bias[i % cols];
  return emit<T>("add_bias", a.shape(), std::move(out), {&a, &bias}, [cols](Node<T>& self) {
    if (T* d = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
    if (T* d = input_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i % cols] += self.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * f;
  return emit<T>("scale", a.shape(), std::move(out), {&a}, [f](Node<T>& self) {
    T* d = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * f;
  });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  return emit<T>("relu", a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    T* d = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (self.value[i] > T{0}) d[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizers

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis) {
  const std::size_t ax = resolve_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), ax);
  std::vector<T> out(a.size());
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T peak = x[base];
      for (std::size_t j = 1; j < s.extent; ++j) peak = std::max(peak, x[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(x[base + j * s.inner] - peak);
        out[base + j * s.inner] = e;
        total += e;
      }
      const T inv = static_cast<T>(1.0 / total);
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] *= inv;
    }
  }
  return emit<T>("softmax", a.shape(), std::move(out), {&a}, [s](Node<T>& self) {
    T* d = input_grad(self, 0);
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) {
          dot += double(dy[base + j * s.inner]) * y[base + j * s.inner];
        }
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t i = base + j * s.inner;
          d[i] += y[i] * (dy[i] - static_cast<T>(dot));
        }
      }
    }
  });
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  std::vector<T> out(a.size());
  const T* x = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x + r * cols;
    const T peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(double(row[j] - peak));
    const T lse = peak + static_cast<T>(std::log(total));
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = row[j] - lse;
  }
  return emit<T>("log_softmax", a.shape(), std::move(out), {&a}, [rows, cols](Node<T>& self) {
    T* d = input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * cols;
      const T* y = self.value.data() + r * cols;
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) total += dy[j];
      for (std::size_t j = 0; j < cols; ++j) {
        d[r * cols + j] += dy[j] - std::exp(y[j]) * static_cast<T>(total);
      }
    }
  });
}

namespace {

/// Shared backward for normalizations: given xhat, inv_std and the upstream
/// grad of xhat over one group of n values, accumulates into dx.
template <class T>
void normalize_backward(const T* dxhat, const T* xhat, T inv_std, std::size_t n, T* dx,
                        std::size_t stride = 1) {
  double sum_d = 0.0, sum_dx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum_d += dxhat[i];
    sum_dx += double(dxhat[i]) * xhat[i * stride];
  }
  const double inv_n = 1.0 / double(n);
  for (std::size_t i = 0; i < n; ++i) {
    dx[i * stride] += static_cast<T>(inv_std * (dxhat[i] - inv_n * sum_d -
                                                inv_n * xhat[i * stride] * sum_dx));
  }
}

}  // namespace

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, double eps) {
  const std::size_t cols = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 || bias.dim(0) != cols) {
    throw DimensionError("layer_norm: gain/bias must have extent " + std::to_string(cols));
  }
  const std::size_t rows = x.size() / cols;
  std::vector<T> xhat(x.size()), out(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * cols;
    double m = 0.0;
    for (std::size_t j = 0; j < cols; ++j) m += row[j];
    m /= double(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - m) * (row[j] - m);
    var /= double(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(inv);
    for (std::size_t j = 0; j < cols; ++j) {
      const T h = static_cast<T>((row[j] - m) * inv);
      xhat[r * cols + j] = h;
      out[r * cols + j] = h * gain[j] + bias[j];
    }
  }
  if (!recording<T>({&x, &gain, &bias})) xhat.clear();
  return emit<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const T* dy = self.grad.data();
        const auto& g = input_value(self, 1);
        T* dx = input_grad(self, 0);
        T* dg = input_grad(self, 1);
        T* db = input_grad(self, 2);
        std::vector<T> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            dxhat[j] = dy[base + j] * g[j];
            if (dg) dg[j] += dy[base + j] * xhat[base + j];
            if (db) db[j] += dy[base + j];
          }
          if (dx) normalize_backward(dxhat.data(), xhat.data() + base, inv_std[r], cols, dx + base);
        }
      });
}

template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, std::size_t groups, double eps) {
  if (x.rank() < 2) throw DimensionError("group_norm expects [C, ...], got " + shape_str(x.shape()));
  const std::size_t channels = x.dim(0);
  if (gain.rank() != 1 || gain.dim(0) != channels || bias.rank() != 1 || bias.dim(0) != channels) {
    throw DimensionError("group_norm: gain/bias must have extent " + std::to_string(channels));
  }
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  const std::size_t positions = x.size() / channels;
  const std::size_t group_len = channels / groups * positions;
  std::vector<T> xhat(x.size()), out(x.size()), inv_std(groups);
  const T* xv = x.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* block = xv + g * group_len;
    double m = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) m += block[i];
    m /= double(group_len);
    double var = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) var += (block[i] - m) * (block[i] - m);
    var /= double(group_len);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[g] = static_cast<T>(inv);
    for (std::size_t i = 0; i < group_len; ++i) {
      const std::size_t idx = g * group_len + i;
      const std::size_t c = idx / positions;
      xhat[idx] = static_cast<T>((block[i] - m) * inv);
      out[idx] = xhat[idx] * gain[c] + bias[c];
    }
  }
  if (!recording<T>({&x, &gain, &bias})) xhat.clear();
  return emit<T>("group_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                 [groups, positions, group_len, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](Node<T>& self) {
                   const T* dy = self.grad.data();
                   const auto& gv = input_value(self, 1);
                   T* dx = input_grad(self, 0);
                   T* dg = input_grad(self, 1);
                   T* db = input_grad(self, 2);
                   std::vector<T> dxhat(group_len);
                   for (std::size_t g = 0; g < groups; ++g) {
                     for (std::size_t i = 0; i < group_len; ++i) {
                       const std::size_t idx = g * group_len + i;
                       const std::size_t c = idx / positions;
                       dxhat[i] = dy[idx] * gv[c];
                       if (dg) dg[c] += dy[idx] * xhat[idx];
                       if (db) db[c] += dy[idx];
                     }
                     if (dx) {
                       normalize_backward(dxhat.data(), xhat.data() + g * group_len, inv_std[g],
                                          group_len, dx + g * group_len);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

struct ConvGeometry {
  std::size_t c_in, d, h, w;
  std::size_t c_out, kd, kh, kw;
  Extent3 stride, pad;
  std::size_t od, oh, ow;

  std::size_t patch() const { return c_in * kd * kh * kw; }
  std::size_t plane() const { return oh * ow; }
  std::size_t out_positions() const { return od * oh * ow; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && stride == Extent3{1, 1, 1} && pad == Extent3{0, 0, 0};
  }
};

// Column buffer budget in elements; convolution runs over chunks of output
// depth planes so the lowered matrix stays below it.
constexpr std::size_t kColumnBudget = std::size_t{1} << 23;

std::size_t planes_per_chunk(const ConvGeometry& g) {
  const std::size_t per_plane = g.patch() * g.plane();
  return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_plane, 1), 1, g.od);
}

/// Lowers output planes [od0, od1) into a [patch, planes*oh*ow] matrix.
template <class T>
void im2col(const ConvGeometry& g, const T* x, std::size_t od0, std::size_t od1, T* cols) {
  const std::size_t width = (od1 - od0) * g.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* xc = x + c * g.d * g.h * g.w;
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          T* dst = cols + row * width;
          for (std::size_t zd = od0; zd < od1; ++zd) {
            const long id = long(zd * g.stride[0] + a) - long(g.pad[0]);
            for (std::size_t zh = 0; zh < g.oh; ++zh) {
              const long ih = long(zh * g.stride[1] + b) - long(g.pad[1]);
              T* out = dst + ((zd - od0) * g.oh + zh) * g.ow;
              if (id < 0 || id >= long(g.d) || ih < 0 || ih >= long(g.h)) {
                std::fill(out, out + g.ow, T{0});
                continue;
              }
              const T* src = xc + (std::size_t(id) * g.h + std::size_t(ih)) * g.w;
              for (std::size_t zw = 0; zw < g.ow; ++zw) {
                const long iw = long(zw * g.stride[2] + e) - long(g.pad[2]);
                out[zw] = (iw < 0 || iw >= long(g.w)) ? T{0} : src[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* cols, std::size_t od0, std::size_t od1, T* dx) {
  const std::size_t width = (od1 - od0) * g.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* xc = dx + c * g.d * g.h * g.w;
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          const T* src = cols + row * width;
          for (std::size_t zd = od0; zd < od1; ++zd) {
            const long id = long(zd * g.stride[0] + a) - long(g.pad[0]);
            if (id < 0 || id >= long(g.d)) continue;
            for (std::size_t zh = 0; zh < g.oh; ++zh) {
              const long ih = long(zh * g.stride[1] + b) - long(g.pad[1]);
              if (ih < 0 || ih >= long(g.h)) continue;
              const T* in = src + ((zd - od0) * g.oh + zh) * g.ow;
              T* dst = xc + (std::size_t(id) * g.h + std::size_t(ih)) * g.w;
              for (std::size_t zw = 0; zw < g.ow; ++zw) {
                const long iw = long(zw * g.stride[2] + e) - long(g.pad[2]);
                if (iw >= 0 && iw < long(g.w)) dst[iw] += in[zw];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, Extent3 stride,
                      Extent3 padding) {
  if (input.rank() != 4 || kernels.rank() != 5) {
    throw DimensionError("conv3d expects input [C,D,H,W] and kernels [O,C,kd,kh,kw], got " +
                         shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw DimensionError("conv3d channel mismatch: input " + shape_str(input.shape()) +
                         ", kernels " + shape_str(kernels.shape()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 kernels.dim(0), kernels.dim(2), kernels.dim(3), kernels.dim(4),
                 stride, padding, 0, 0, 0};
  g.od = window_extent(g.d, g.kd, stride[0], padding[0]);
  g.oh = window_extent(g.h, g.kh, stride[1], padding[1]);
  g.ow = window_extent(g.w, g.kw, stride[2], padding[2]);

  const std::size_t out_pos = g.out_positions();
  std::vector<T> out(g.c_out * out_pos);
  const T* x = input.data().data();
  const T* w = kernels.data().data();
  const int k = int(g.patch());
  if (g.pointwise()) {
    detail::gemm(false, false, int(g.c_out), int(out_pos), k, T{1}, w, k, x, int(out_pos), T{0},
                 out.data(), int(out_pos));
  } else {
    const std::size_t chunk = planes_per_chunk(g);
    std::vector<T> cols(g.patch() * chunk * g.plane());
    for (std::size_t od0 = 0; od0 < g.od; od0 += chunk) {
      const std::size_t od1 = std::min(g.od, od0 + chunk);
      const int width = int((od1 - od0) * g.plane());
      im2col(g, x, od0, od1, cols.data());
      detail::gemm(false, false, int(g.c_out), width, k, T{1}, w, k, cols.data(), width, T{0},
                   out.data() + od0 * g.plane(), int(out_pos));
    }
  }
  return emit<T>("conv3d", Shape{g.c_out, g.od, g.oh, g.ow}, std::move(out), {&input, &kernels},
                 [g](Node<T>& self) {
                   const T* dy = self.grad.data();
                   const T* xv = input_value(self, 0).data();
                   const T* wv = input_value(self, 1).data();
                   T* dx = input_grad(self, 0);
                   T* dw = input_grad(self, 1);
                   const int k = int(g.patch());
                   const int out_pos = int(g.out_positions());
                   if (g.pointwise()) {
                     if (dw) {
                       detail::gemm(false, true, int(g.c_out), k, out_pos, T{1}, dy, out_pos, xv,
                                    out_pos, T{1}, dw, k);
                     }
                     if (dx) {
                       detail::gemm(true, false, k, out_pos, int(g.c_out), T{1}, wv, k, dy,
                                    out_pos, T{1}, dx, out_pos);
                     }
                     return;
                   }
                   const std::size_t chunk = planes_per_chunk(g);
                   std::vector<T> cols(g.patch() * chunk * g.plane());
                   std::vector<T> dcols(dx ? cols.size() : 0);
                   for (std::size_t od0 = 0; od0 < g.od; od0 += chunk) {
                     const std::size_t od1 = std::min(g.od, od0 + chunk);
                     const int width = int((od1 - od0) * g.plane());
                     const T* dy_chunk = dy + od0 * g.plane();
                     if (dw) {
                       im2col(g, xv, od0, od1, cols.data());
                       detail::gemm(false, true, int(g.c_out), k, width, T{1}, dy_chunk, out_pos,
                                    cols.data(), width, T{1}, dw, k);
                     }
                     if (dx) {
                       detail::gemm(true, false, k, width, int(g.c_out), T{1}, wv, k, dy_chunk,
                                    out_pos, T{0}, dcols.data(), width);
                       col2im(g, dcols.data(), od0, od1, dx);
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> max_pool3d(const BasicTensor<T>& input, Extent3 kernel, Extent3 stride,
                          Extent3 padding) {
  if (input.rank() != 4) {
    throw DimensionError("max_pool3d expects [C,D,H,W], got " + shape_str(input.shape()));
  }
  const std::size_t c = input.dim(0), d = input.dim(1), h = input.dim(2), w = input.dim(3);
  for (std::size_t i = 0; i < 3; ++i) {
    if (padding[i] >= kernel[i] && kernel[i] > 0) {
      throw DimensionError("max_pool3d padding must be smaller than the kernel");
    }
  }
  const std::size_t od = window_extent(d, kernel[0], stride[0], padding[0]);
  const std::size_t oh = window_extent(h, kernel[1], stride[1], padding[1]);
  const std::size_t ow = window_extent(w, kernel[2], stride[2], padding[2]);
  const bool keep_argmax = recording<T>({&input});
  std::vector<T> out(c * od * oh * ow);
  std::vector<std::size_t> argmax(keep_argmax ? out.size() : 0);
  const T* x = input.data().data();
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t zd = 0; zd < od; ++zd) {
      const long d0 = long(zd * stride[0]) - long(padding[0]);
      for (std::size_t zh = 0; zh < oh; ++zh) {
        const long h0 = long(zh * stride[1]) - long(padding[1]);
        for (std::size_t zw = 0; zw < ow; ++zw, ++o) {
          const long w0 = long(zw * stride[2]) - long(padding[2]);
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (long a = std::max(0L, d0); a < std::min(long(d), d0 + long(kernel[0])); ++a) {
            for (long b = std::max(0L, h0); b < std::min(long(h), h0 + long(kernel[1])); ++b) {
              for (long e = std::max(0L, w0); e < std::min(long(w), w0 + long(kernel[2])); ++e) {
                const std::size_t idx = ((ch * d + std::size_t(a)) * h + std::size_t(b)) * w +
                                        std::size_t(e);
                if (x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                }
              }
            }
          }
          out[o] = best;
          if (keep_argmax) argmax[o] = best_idx;
        }
      }
    }
  }
  return emit<T>("max_pool3d", Shape{c, od, oh, ow}, std::move(out), {&input},
                 [argmax = std::move(argmax)](Node<T>& self) {
                   T* dx = input_grad(self, 0);
                   for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad[i];
                 });
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  if (input.rank() < 2) {
    throw DimensionError("global_avg_pool expects [C, ...], got " + shape_str(input.shape()));
  }
  const std::size_t c = input.dim(0);
  const std::size_t n = input.size() / c;
  std::vector<T> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += input[ch * n + i];
    out[ch] = static_cast<T>(total / double(n));
  }
  return emit<T>("global_avg_pool", Shape{c}, std::move(out), {&input}, [c, n](Node<T>& self) {
    T* dx = input_grad(self, 0);
    const T inv = static_cast<T>(1.0 / double(n));
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = self.grad[ch] * inv;
      for (std::size_t i = 0; i < n; ++i) dx[ch * n + i] += g;
    }
  });
}

template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding table must be [V,d], got " + shape_str(table.shape()));
  }
  if (ids.empty()) throw DimensionError("embedding of an empty id sequence");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<T> out(rows.size() * width);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] < 0 || std::size_t(rows[t]) >= vocab) {
      throw ContractError("token id " + std::to_string(rows[t]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(table.data().data() + std::size_t(rows[t]) * width, width, out.data() + t * width);
  }
  const std::size_t len = rows.size();
  return emit<T>("embedding", Shape{len, width}, std::move(out), {&table},
                 [rows = std::move(rows), width](Node<T>& self) {
                   T* dt = input_grad(self, 0);
                   for (std::size_t t = 0; t < rows.size(); ++t) {
                     T* dst = dt + std::size_t(rows[t]) * width;
                     const T* src = self.grad.data() + t * width;
                     for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions and regularization

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double total = 0.0;
  for (const T v : a.data()) total += v;
  return emit<T>("sum", Shape{1}, {static_cast<T>(total)}, {&a}, [](Node<T>& self) {
    T* d = input_grad(self, 0);
    const T g = self.grad[0];
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), 1.0 / double(a.size()));
}

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, SplitMix64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  if (rate == 0.0) return a;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T{0} : keep_scale;
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * mask[i];
  return emit<T>("dropout", a.shape(), std::move(out), {&a},
                 [mask = std::move(mask)](Node<T>& self) {
                   T* d = input_grad(self, 0);
                   for (std::size_t i = 0; i < mask.size(); ++i) d[i] += self.grad[i] * mask[i];
                 });
}

#define SLT_INSTANTIATE_OPS(T)                                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> transpose(const BasicTensor<T>&, std::size_t, std::size_t);            \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                 \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> add_bias(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                  \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                   \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                    \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                     const BasicTensor<T>&, double);                             \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                     const BasicTensor<T>&, std::size_t, double);                \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, Extent3, Extent3); \
  template BasicTensor<T> max_pool3d(const BasicTensor<T>&, Extent3, Extent3, Extent3);          \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);                \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                            \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                           \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, SplitMix64&);

SLT_INSTANTIATE_OPS(float)
SLT_INSTANTIATE_OPS(double)

#undef SLT_INSTANTIATE_OPS

}  // namespace slt
