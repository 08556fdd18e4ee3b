#include "mmt/tensor.h"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "mmt/errors.h"

namespace mmt {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  if (numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return node_->data.size() / node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), node_->data);
  out.node_->requires_grad = node_->requires_grad && !node_->on_tape;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (numel(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  // Shares storage only for non-recorded tensors; a recorded tensor would
  // need its own backward rule.
  Tensor out;
  out.node_ = std::make_shared<TensorNode<T>>(*node_);
  out.node_->shape = std::move(shape);
  out.node_->grad.clear();
  out.node_->on_tape = false;
  return out;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(std::vector<std::shared_ptr<Node>> inputs, std::shared_ptr<Node> output,
                     BackwardFn backward) {
  if (consumed_) throw ContractError("tape already consumed by backward(); call reset() first");
  output->requires_grad = true;
  output->on_tape = true;
  records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw ContractError("backward() called twice on the same tape without reset()");
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& root = loss.node();
  auto it = std::find_if(records_.rbegin(), records_.rend(),
                         [&](const Record& r) { return r.output == root; });
  if (it == records_.rend()) throw ContractError("loss was not produced on this tape");
  consumed_ = true;

  root->grad.assign(1, T(1));
  for (; it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    for (auto& in : it->inputs) {
      if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), T(0));
    }
    it->backward();
    // Intermediate gradients are no longer needed once propagated.
    if (it->output != root) {
      it->output->grad.clear();
      it->output->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void Tape<T>::reset() {
  records_.clear();
  consumed_ = false;
}

namespace {
template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
NoTapeScope<T>::NoTapeScope() : previous_(tape_slot<T>()) {
  tape_slot<T>() = nullptr;
}

template <typename T>
NoTapeScope<T>::~NoTapeScope() {
  tape_slot<T>() = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoTapeScope<float>;
template class NoTapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();

}  // namespace mmt
