#include "imm_gpt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace imm_gpt {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = numel(shape);
  return from(std::move(shape), Buffer<T>(static_cast<std::size_t>(n), value),
              requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, Buffer<T> values, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, Buffer<T> values,
                                 std::vector<Tensor> parents,
                                 std::function<void(Node<T>&)> backward) {
  Tensor out = from(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  auto& node = out.node();
  node.requires_grad = true;
  // Parents are kept even when they do not need a gradient: the backward
  // closure indexes them positionally and checks requires_grad itself.
  for (auto& p : parents) node.parents.push_back(p.node_);
  node.backward = std::move(backward);
  return out;
}

template <typename T>
Node<T>& Tensor<T>::node() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return *node_;
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node().value[static_cast<std::size_t>(flat)];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) return {};
  return node().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = node();
  if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  visited.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
  }
  loss.node().ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->is_leaf()) node->backward(*node);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace imm_gpt
