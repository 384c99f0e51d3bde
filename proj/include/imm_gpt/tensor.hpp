#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace imm_gpt {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage. Vectorized kernels peel unaligned heads with
// scalar code, so results would otherwise depend on where malloc put the data.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Raised for malformed shapes and out-of-range indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One vertex of the reverse-mode graph. `backward` reads `grad` and
// accumulates into the grads of `parents`.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor with an optional gradient accumulator.
///
/// A Tensor is a cheap handle: copies share storage. Operations in ops.hpp
/// return new tensors and, when any input requires a gradient and grad mode
/// is on, record a backward closure linking the result to its inputs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer<T> values, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }
  static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(values), requires_grad);
  }
  static Tensor scalar(T value) { return from({}, {value}); }

  // Builds an op result. Parents that do not require a gradient are dropped;
  // if none remain (or grad mode is off) the result is a constant leaf.
  static Tensor make_result(Shape shape, Buffer<T> values,
                            std::vector<Tensor> parents,
                            std::function<void(Node<T>&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(node().value.size()); }

  std::span<const T> data() const { return node().value; }
  std::span<T> mutable_data() { return node().value; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }
  bool has_grad() const { return node().grad.size() == node().value.size(); }
  // Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad() { return node().ensure_grad(); }
  void zero_grad();

  Tensor detach() const { return from(shape(), node().value); }
  Tensor clone() const { return from(shape(), node().value, requires_grad()); }

  Node<T>& node() const;
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<T>> node_;
};

/// Runs reverse-mode differentiation from a scalar loss. Leaf tensors that
/// require a gradient accumulate into their grad; intermediate grads are
/// reset first so the same graph may be differentiated more than once.
template <typename T>
void backward(const Tensor<T>& loss);

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// A trainable tensor with its dotted path inside the model,
/// e.g. "layer.2.imm.f_write.weight".
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace imm_gpt
