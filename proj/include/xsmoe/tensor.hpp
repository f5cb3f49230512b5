#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xsmoe/error.hpp"

namespace xsmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Propagates this node's grad into its inputs. Empty for leaves.
  std::function<void(const Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation, weight surgery).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major tensor handle with shared ownership of its storage.
/// Copies alias; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->value.assign(shape_size(shape), T(0));
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_size(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }
  T& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor t = from(shape(), node_->value, requires_grad());
    return t;
  }
  // Same values, no graph history, no grad requirement.
  Tensor detach() const { return from(shape(), node_->value, false); }

  bool same_storage(const Tensor& o) const { return node_ == o.node_; }

  // Internal: ops construct and wire nodes directly.
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of the non-leaf nodes created since the last backward.
/// Nodes are appended at creation, so the list is already topologically sorted.
template <typename T>
class Tape {
 public:
  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  void record(std::shared_ptr<detail::Node<T>> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const auto& n = *it;
      if (n->grad.empty() || !n->backward) continue;
      n->backward(*n);
    }
    nodes_.clear();
  }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

/// Populates grads of every requires_grad leaf reachable from `loss` and clears
/// the tape. A loss that does not depend on any trainable tensor is a no-op.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto& tape = Tape<T>::current();
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  loss.node()->ensure_grad()[0] += T(1);
  tape.run_backward();
}

}  // namespace xsmoe
