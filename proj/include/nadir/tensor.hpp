// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "nadir/common.hpp"

namespace nadir {

// Dense row-major tensor with an optional gradient buffer. Copies are
// shallow (shared storage); ops always allocate fresh outputs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(numel(t.n_->shape), T(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (T& x : t.n_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }
  std::size_t size() const { return n_->value.size(); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::vector<T>& grad() {
    ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad() const { return n_->grad; }

  void ensure_grad() {
    if (n_->grad.size() != n_->value.size()) n_->grad.assign(n_->value.size(), T(0));
  }
  void zero_grad() {
    if (!n_->grad.empty()) n_->grad.assign(n_->value.size(), T(0));
  }

  T item() const {
    if (size() != 1) throw InvariantError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  // identity of the underlying storage (for debugging / registry checks)
  const void* node_id() const { return n_.get(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> n_;
};

// Boolean companion tensor; ops only consume it (never differentiate).
struct BoolTensor {
  Shape shape;
  std::vector<std::uint8_t> v;

  static BoolTensor falses(Shape s) {
    BoolTensor b;
    b.v.assign(numel(s), 0);
    b.shape = std::move(s);
    return b;
  }
};

// Reverse-mode tape: ordered record of executed differentiable operations.
// backward() replays it once in exact reverse execution order.
template <typename T>
class Graph {
 public:
  void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  void backward(Tensor<T> loss) {
    if (consumed_) throw InvariantError("backward() called twice on the same graph");
    if (!loss.defined() || loss.size() != 1)
      throw InvariantError("backward() requires a scalar loss");
    consumed_ = true;
    loss.ensure_grad();
    loss.grad()[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  std::size_t num_ops() const { return tape_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> tape_;
  bool consumed_ = false;
};

}  // namespace nadir
