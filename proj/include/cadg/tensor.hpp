#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record the node's parents and a closure that pushes the
// node's gradient back into them; `backward` walks the recorded graph in
// reverse topological order. Copying a Tensor copies the handle, not the data
// (use `detach` for a deep copy).

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cadg {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// 64-byte aligned storage so that every buffer presents the same alignment to
// vectorized kernels; results then depend only on shapes and values.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    validate(shape);
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::span<const double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    validate(shape);
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->data.assign(values.begin(), values.end());
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size()),
               requires_grad) {}

  static Tensor scalar(double value) { return Tensor(Shape{}, value); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  /// Extent of axis `axis`; negative values count from the back.
  std::size_t extent(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<double> data() { return {node_->data.data(), node_->data.size()}; }
  std::span<const double> data() const { return {node_->data.data(), node_->data.size()}; }
  std::span<double> grad() { return {node_->grad.data(), node_->grad.size()}; }
  std::span<const double> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && node_->requires_grad; }

  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw std::logic_error("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    if (on) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
    }
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Deep copy of the values with no graph linkage.
  Tensor detach() const { return Tensor(shape(), data()); }

  detail::Node* node() const { return node_.get(); }
  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  static void validate(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Wraps freshly computed values into a tensor and, when any input carries
/// gradients and recording is enabled, links it into the graph.
inline Tensor make_result(Shape shape, Buffer values, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  bool needs_grad = false;
  if (!grad_disabled()) {
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are reset at the start of each sweep.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not connected to any parameter");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf) node->grad.assign(node->data.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf && (*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace cadg
