#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dera/errors.hpp"

namespace dera {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Accumulates the contribution of `grad_out` into the input gradients.
/// `grad_in[i]` is null when input i does not need a gradient on this pass.
template <class T>
using BackwardFn = std::function<void(const Node<T>& self, const T* grad_out, std::span<T* const> grad_in)>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<NodePtr<T>> inputs;
  BackwardFn<T> backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

/// Graph handle over a dense row-major array. Copies share the node.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor leaf(Shape shape, std::vector<T> data, bool requires_grad) {
    if (data.size() != ::dera::numel(shape)) {
      throw ContractError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                          shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor constant(Shape shape, std::vector<T> data) { return leaf(std::move(shape), std::move(data), false); }
  static Tensor zeros(Shape shape) {
    const auto n = ::dera::numel(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T v) {
    const auto n = ::dera::numel(shape);
    return constant(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return constant({}, {v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  /// Only for leaves (parameters, inputs). Mutating interior values would
  /// invalidate the recorded backward closures.
  std::span<T> mutable_data() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  Node<T>* node() const noexcept { return node_.get(); }
  const NodePtr<T>& ptr() const noexcept { return node_; }
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  NodePtr<T> node_;
};

namespace detail {

/// Branch-free scan: v - v is NaN exactly when v is NaN or infinite.
template <class T>
bool all_finite(const T* v, std::size_t n) {
  unsigned bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = v[i] - v[i];
    bad |= static_cast<unsigned>(d != d);
  }
  return bad == 0;
}

template <class T>
void check_finite(const char* op, std::span<const T> values) {
  if (all_finite(values.data(), values.size())) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(op, "non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Thread-local switch for graph recording. Inference paths disable it so no
/// closures or intermediate inputs are retained.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }

 private:
  friend class NoGradGuard;
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Creates an interior node. Inputs and the closure are dropped when no input
/// needs a gradient, so constant subgraphs are freed eagerly.
template <class T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  BackwardFn<T> backward) {
  detail::check_finite<T>(op, value);
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Record/replay of detached values. Finite-difference checks of graphs that
/// contain stop-gradients (straight-through quantizer, SACP coefficients)
/// compare against the surrogate in which every detached quantity is frozen
/// at its unperturbed value; this tape provides that freezing.
class DetachTape {
 public:
  enum class Mode { kRecord, kReplay };

  explicit DetachTape(Mode mode) : mode_(mode) {}

  Mode mode() const noexcept { return mode_; }
  void rewind() noexcept { cursor_ = 0; }
  void set_mode(Mode m) noexcept {
    mode_ = m;
    cursor_ = 0;
  }

  /// Records `values` or, in replay mode, overwrites them with the stored ones.
  template <class T>
  void visit(std::vector<T>& values) {
    if (mode_ == Mode::kRecord) {
      entries_.emplace_back(values.begin(), values.end());
      return;
    }
    if (cursor_ >= entries_.size() || entries_[cursor_].size() != values.size()) {
      throw ContractError("detach tape replay diverged from the recorded graph");
    }
    const auto& stored = entries_[cursor_++];
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(stored[i]);
  }

  static DetachTape*& active() {
    thread_local DetachTape* tape = nullptr;
    return tape;
  }

 private:
  Mode mode_;
  std::size_t cursor_ = 0;
  std::vector<std::vector<double>> entries_;
};

/// Installs a tape for the current thread for the lifetime of the guard.
class DetachTapeScope {
 public:
  explicit DetachTapeScope(DetachTape& tape) : prev_(DetachTape::active()) { DetachTape::active() = &tape; }
  ~DetachTapeScope() { DetachTape::active() = prev_; }
  DetachTapeScope(const DetachTapeScope&) = delete;
  DetachTapeScope& operator=(const DetachTapeScope&) = delete;

 private:
  DetachTape* prev_;
};

/// Passes a detached quantity through the active tape, if any.
template <class T>
void visit_detached(std::vector<T>& values) {
  if (auto* tape = DetachTape::active()) tape->visit(values);
}

}  // namespace dera
