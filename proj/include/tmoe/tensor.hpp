#pragma once

// Dense row-major tensors with tape-free reverse-mode autodiff.
//
// Every tensor produced by an op while grad mode is on, and whose inputs
// require gradients, remembers its parents and a closure that pushes its
// gradient back into them. backward() collects the reachable subgraph and runs
// the closures in reverse creation order, so each node is visited once.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tmoe/error.hpp"

namespace tmoe {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// Eigen's vectorized loops peel differently depending on the buffer address,
// which changes rounding. Fixed alignment keeps identical runs bit-identical.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }
  template <class U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept { return true; }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

template <class T>
using Storage = std::vector<T, detail::AlignedAllocator<T>>;

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  Storage<T> data;
  Storage<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Storage<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return !backward_fn; }
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  template <class A>
  static BasicTensor from_data(Shape shape, const std::vector<T, A>& data, bool requires_grad = false) {
    return from_data(std::move(shape), Storage<T>(data.begin(), data.end()), requires_grad);
  }

  static BasicTensor from_data(Shape shape, Storage<T> data, bool requires_grad = false) {
    for (auto extent : shape) {
      require(extent > 0, ErrorCategory::kDimension,
              "tensor extents must be positive, got " + shape_str(shape));
    }
    require(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
            ErrorCategory::kDimension,
            "shape " + shape_str(shape) + " does not match " +
                std::to_string(data.size()) + " elements");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->sequence = detail::next_sequence();
    return BasicTensor(std::move(node));
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), Storage<T>(static_cast<std::size_t>(n), T(0)),
                     requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), Storage<T>(static_cast<std::size_t>(n), value),
                     requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    const auto r = rank();
    if (i < 0) i += r;
    require(i >= 0 && i < r, ErrorCategory::kDimension,
            "axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    require(numel() == 1, ErrorCategory::kContract,
            "item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::int64_t flat) const { return node_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool value) {
    node_->requires_grad = value;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // A graph-free copy of the values.
  BasicTensor detach() const { return from_data(shape(), node_->data, false); }

  void backward() const;

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;

template <class T>
void BasicTensor<T>::backward() const {
  require(defined() && numel() == 1, ErrorCategory::kContract,
          "backward() requires a scalar loss, got " +
              (defined() ? shape_str(shape()) : std::string("undefined tensor")));
  require(node_->requires_grad, ErrorCategory::kContract,
          "backward() on a tensor that does not depend on any parameter");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->sequence > b->sequence; });

  // Interior gradients are per-pass scratch; leaves accumulate across passes.
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Wraps freshly computed values into a tensor, wiring the backward closure
// only when recording is on and some input needs a gradient.
template <class T, class Fn>
BasicTensor<T> make_result(Shape shape, Storage<T> data,
                           std::initializer_list<const BasicTensor<T>*> inputs, Fn&& fn) {
  auto out = BasicTensor<T>::from_data(std::move(shape), std::move(data));
  if (grad_enabled() && any_requires_grad<T>(inputs)) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto* t : inputs) {
      if (t && t->defined()) node.parents.push_back(t->node());
    }
    node.backward_fn = std::forward<Fn>(fn);
  }
  return out;
}

template <class T>
BasicTensor<T> make_result_n(Shape shape, Storage<T> data,
                             const std::vector<const BasicTensor<T>*>& inputs,
                             std::function<void(Node<T>&)> fn) {
  auto out = BasicTensor<T>::from_data(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto* t : inputs) needs = needs || (t->defined() && t->requires_grad());
  if (grad_enabled() && needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto* t : inputs) node.parents.push_back(t->node());
    node.backward_fn = std::move(fn);
  }
  return out;
}

}  // namespace detail

}  // namespace tmoe
