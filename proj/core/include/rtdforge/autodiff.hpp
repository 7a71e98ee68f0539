#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "rtdforge/tensor.hpp"

namespace rtdforge {

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread. `backward` replays the records in exact
/// reverse order of construction, which is a valid reverse topological order
/// because every op is recorded after its inputs exist.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<TensorStorage<T>> output, BackwardFn fn);

  /// Populates gradients of every requires_grad leaf reachable from `loss`.
  /// Leaf gradients accumulate across calls; intermediate gradients are reset
  /// at the start of each call.
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<TensorStorage<T>> output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

/// The tape active on this thread, or nullptr when gradients are off.
template <typename T>
Tape<T>* active_tape() noexcept;

/// RAII activation of a tape on the current thread. Scopes nest.
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

/// Runs backward on the active tape. Throws if none is active.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tape<float>;
extern template class Tape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace rtdforge
