#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded operation
};

// Dense row-major array with optional participation in a gradient tape.
// Copies are shallow: two handles to the same node share storage, which is
// what the tape needs. Use clone() for an independent value.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  // Leading extent when the tensor is viewed as a matrix [rows x last_dim].
  std::size_t rows() const;
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  // Same storage, new shape with the same element count.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of differentiable operations. Operations append themselves
// while a TapeScope for this tape is active on the current thread and at
// least one input requires a gradient, so records are topologically ordered
// by construction.
template <typename T>
class Tape {
 public:
  using Node = TensorNode<T>;
  using BackwardFn = std::function<void()>;

  void record(std::vector<std::shared_ptr<Node>> inputs, std::shared_ptr<Node> output,
              BackwardFn backward);

  // Populates gradients of every requires_grad leaf reachable from `loss`.
  // Throws ContractError for non-scalar losses, losses not produced on this
  // tape, or a second call without reset().
  void backward(const Tensor<T>& loss);

  void reset();
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Record {
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>* active_tape();

// Makes `tape` the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Disables recording on the current thread, e.g. for inference.
template <typename T>
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace mmt
