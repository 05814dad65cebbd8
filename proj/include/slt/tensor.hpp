#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slt/errors.hpp"

namespace slt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording for the current thread while alive. Ops executed
/// under the guard produce plain values and release their inputs eagerly.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One vertex of the autodiff graph. `backward_fn` reads this node's grad and
/// accumulates into the grads of `inputs` that require grad.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T{});
    return grad.data();
  }
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(values.size()) + " values");
    }
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T{}), requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static BasicTensor scalar(T v) { return BasicTensor({1}, {v}); }

  static BasicTensor from_node(std::shared_ptr<Node<T>> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct value access for leaves (parameter updates, test perturbation).
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  BasicTensor detach() const { return BasicTensor(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  std::string_view op() const { return node_->op; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Recorded operations reachable from a root, in topological order (every
/// node appears after all of its inputs).
template <class T>
class Tape {
 public:
  static Tape record(const BasicTensor<T>& root);

  std::size_t size() const { return order_.size(); }
  std::span<Node<T>* const> nodes() const { return order_; }

  /// Propagates d(root)/d(node) into every node on the tape. Interior grads
  /// are reset first; leaf grads accumulate across calls.
  void run(const BasicTensor<T>& root) const;

 private:
  std::vector<Node<T>*> order_;
};

/// Reverse-mode pass from a scalar loss.
template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Tape<T>::record(loss).run(loss);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace slt
