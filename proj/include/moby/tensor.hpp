#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "moby/error.hpp"

namespace moby {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tape;

namespace detail {

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  std::shared_ptr<Array> value;
  std::unique_ptr<Array> grad;
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major n-d array of `Scalar` with optional participation in a
/// gradient tape.
///
/// A Tensor is a cheap handle: copies share the same node. Values are
/// stored contiguously with the last axis fastest. `requires_grad` tensors
/// accumulate gradients when an active Tape records operations on them.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = RowMatrix<Scalar>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, Array::Zero(numel(shape)), requires_grad) {}

  Tensor(Shape shape, Array values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<Scalar>>()) {
    for (Index e : shape) {
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::make_shared<Array>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  /// Values left unset; for op outputs that are fully overwritten.
  static Tensor uninitialized(Shape shape) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array(n));
  }

  static Tensor full(Shape shape, Scalar v) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, v));
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a));
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, Array::Constant(1, v)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const {
    return node_->shape[static_cast<std::size_t>(axis < 0 ? axis + rank() : axis)];
  }
  Index size() const { return node_->value->size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.reset();
  }

  const Array& data() const { return *node_->value; }
  /// Mutable access is reserved for optimizers, initializers and loaders.
  Array& data() { return *node_->value; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return (*node_->value)[0];
  }
  Scalar operator[](Index i) const { return (*node_->value)[i]; }

  /// View as a matrix whose columns are the last axis.
  ConstMatrixMap matrix() const {
    const Index cols = rank() == 0 ? 1 : shape().back();
    return ConstMatrixMap(node_->value->data(), size() / cols, cols);
  }
  MatrixMap matrix() {
    const Index cols = rank() == 0 ? 1 : shape().back();
    return MatrixMap(node_->value->data(), size() / cols, cols);
  }

  bool has_grad() const { return node_->grad != nullptr; }
  const Array& grad() const {
    if (!node_->grad) throw ContractError("tensor has no gradient");
    return *node_->grad;
  }
  void clear_grad() { node_->grad.reset(); }

  /// Gradient buffer, allocated as zeros on first use. Tensors that do not
  /// require grad never own one. Accumulation goes through shared state, so
  /// const handles can receive gradients.
  Array& grad_buffer() const {
    if (!node_->requires_grad) throw ContractError("gradient requested for a tensor that does not require grad");
    if (!node_->grad) node_->grad = std::make_unique<Array>(Array::Zero(size()));
    return *node_->grad;
  }

  /// For backward writes that cover every element: a buffer created here is
  /// left unset and `fresh` tells the caller to assign rather than add.
  Array& grad_buffer(bool& fresh) const {
    if (!node_->requires_grad) throw ContractError("gradient requested for a tensor that does not require grad");
    fresh = !node_->grad;
    if (fresh) node_->grad = std::make_unique<Array>(size());
    return *node_->grad;
  }

  /// Shares storage, never participates in gradient flow.
  Tensor detach() const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node<Scalar>>();
    out.node_->shape = node_->shape;
    out.node_->value = node_->value;
    return out;
  }

  /// Deep copy of the values; the result does not require grad.
  Tensor clone() const { return Tensor(shape(), data()); }

  bool shares_storage_with(const Tensor& other) const { return node_->value == other.node_->value; }

  /// Same storage, different extents; used by `reshape`.
  Tensor alias(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot view " + to_string(this->shape()) + " as " + to_string(shape));
    }
    Tensor out;
    out.node_ = std::make_shared<detail::Node<Scalar>>();
    out.node_->shape = std::move(shape);
    out.node_->value = node_->value;
    return out;
  }

 private:
  std::shared_ptr<detail::Node<Scalar>> node_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed; ops whose inputs require grad record themselves on it.
/// Without an active tape ops run in inference mode. A tape supports one
/// backward pass and is cleared by it.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using Backward = std::function<void(const Array&)>;

  Tape() : previous_(current()) { current() = this; }
  ~Tape() { current() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(const char* op, Tensor<Scalar> output, Backward backward) {
    entries_.push_back({op, std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Name of the earliest recorded op whose output is not finite, or empty.
  std::string first_non_finite() const {
    for (const auto& e : entries_) {
      if (!e.output.data().allFinite()) return e.op;
    }
    return {};
  }

  void backward(Tensor<Scalar> loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (entries_.empty()) throw ContractError("backward() on an empty tape");
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any requires_grad tensor");
    loss.grad_buffer().setConstant(Scalar(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward(it->output.grad());
    }
    entries_.clear();
  }

 private:
  struct Entry {
    const char* op;
    Tensor<Scalar> output;
    Backward backward;
  };

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  Tape* previous_;
  std::vector<Entry> entries_;
};

/// Backward through the thread's active tape.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  auto* tape = Tape<Scalar>::active();
  if (!tape) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

/// A named trainable tensor, e.g. "online.backbone.stage0.block1.attn.qkv.weight".
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
};

}  // namespace moby
