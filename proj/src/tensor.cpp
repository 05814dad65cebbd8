#include "slt/tensor.hpp"

#include <unordered_set>
#include <utility>

namespace slt {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

template <class T>
Tape<T> Tape<T>::record(const BasicTensor<T>& root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad()) return tape;

  // Iterative post-order DFS; inputs are emitted before their consumers.
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next_input] = stack.back();
    if (next_input < node->inputs.size()) {
      Node<T>* child = node->inputs[next_input++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

template <class T>
void Tape<T>::run(const BasicTensor<T>& root) const {
  if (order_.empty()) return;
  for (auto* node : order_) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T{});
  }
  root.node()->grad_data()[0] += T{1};
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->is_leaf()) node->backward_fn(*node);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace slt
