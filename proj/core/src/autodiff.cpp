#include "rtdforge/autodiff.hpp"

#include <algorithm>

#include "rtdforge/error.hpp"

namespace rtdforge {

namespace {

template <typename T>
Tape<T>*& tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() noexcept {
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
void Tape<T>::record(std::shared_ptr<TensorStorage<T>> output, BackwardFn fn) {
  nodes_.push_back(Node{std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& target = loss.storage();
  const auto produced = std::find_if(nodes_.begin(), nodes_.end(),
                                     [&](const Node& n) { return n.output == target; });
  if (produced == nodes_.end()) {
    throw ValueError("backward: loss was not produced under the active tape");
  }
  for (Node& node : nodes_) {
    std::fill(node.output->grad.begin(), node.output->grad.end(), T{0});
  }
  target->ensure_grad()[0] = T{1};
  // Nodes recorded after the loss cannot contribute to it.
  auto last = std::make_reverse_iterator(produced + 1);
  for (auto it = last; it != nodes_.rend(); ++it) {
    if (!it->output->grad.empty()) {
      it->fn();
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) {
    throw ValueError("backward: no active tape");
  }
  tape->backward(loss);
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>() noexcept;
template Tape<double>* active_tape<double>() noexcept;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace rtdforge
