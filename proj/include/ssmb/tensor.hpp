// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every primitive that has at
// least one input participating in differentiation records its parents and a
// backward rule on the output node. `backward(loss)` rebuilds the tape of
// reachable operations and replays it in exact reverse creation order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmb {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class AxisError : public Error {
 public:
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

std::uint64_t next_seq();

}  // namespace detail

// Thread-local switch that stops operations from being recorded.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor();
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor from(const Shape& shape, std::vector<T> values);
  static Tensor scalar(T value);
  static Tensor vector(std::initializer_list<T> values);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const T> data() const { return node_->data; }
  // Writable access is limited to leaves; recorded outputs are immutable.
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Gradient as a detached tensor, zero-filled when no gradient has flowed.
  Tensor grad_tensor() const;
  void zero_grad();

  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  Tensor detach() const;
  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// The ordered record of differentiable operations reachable from a loss.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  // Creation-ordered op names, useful for inspection.
  std::vector<std::string> op_names() const;
  // Runs backward rules from the newest entry to the oldest.
  void replay_backward(const Tensor<T>& loss) const;

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> entries_;
};

template <typename T>
void backward(const Tensor<T>& loss);

// ---- elementwise ---------------------------------------------------------

enum class BinaryOp { kAdd, kSub, kMul, kDiv, kMax };
enum class UnaryOp { kRelu, kSqrt, kExp, kLog, kNeg };

Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::kAdd, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::kSub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::kMul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::kDiv, a, b); }
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::kMax, a, b); }
template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return elementwise(UnaryOp::kRelu, a); }
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) { return elementwise(UnaryOp::kSqrt, a); }
template <typename T>
Tensor<T> exp(const Tensor<T>& a) { return elementwise(UnaryOp::kExp, a); }
template <typename T>
Tensor<T> log(const Tensor<T>& a) { return elementwise(UnaryOp::kLog, a); }
template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return elementwise(UnaryOp::kNeg, a); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }

// ---- linear algebra and convolution ---------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: N×C×H×W, weight: O×C×KH×KW (odd extents), bias: O.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams params = {});

// Non-overlapping window max pooling; ties route to the first index in scan order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window);

// ---- reductions ----------------------------------------------------------

enum class ReduceOp { kSum, kMean, kMax };

// Empty `axes` reduces over every axis.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, std::vector<std::size_t> axes = {},
                 bool keepdims = false);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::kSum, x, std::move(axes), keepdims);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::kMean, x, std::move(axes), keepdims);
}
template <typename T>
Tensor<T> max(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::kMax, x, std::move(axes), keepdims);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Mean softmax cross-entropy of B×K logits against integer class labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

// ---- shape manipulation --------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
// Rows of x (along axis 0) in the given order; repeated indices are allowed.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> rows);
// For a B×K matrix, picks column cols[b] of every row b; result is B×1.
template <typename T>
Tensor<T> take_per_row(const Tensor<T>& x, std::span<const std::size_t> cols);

}  // namespace ssmb
