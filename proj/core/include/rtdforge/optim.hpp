#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/model.hpp"

namespace rtdforge {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.9999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
};

/// One AdamW update at (1-based) step `t`. Decoupled decay comes first,
/// param -= lr * weight_decay * param, then the bias-corrected Adam step.
/// Arithmetic is carried out in double.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, double lr, const AdamWHyper& hyper, bool apply_decay = true);

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`. Throws ValueError when step lies outside [0, total].
double lr_at(std::uint64_t step, std::uint64_t warmup, std::uint64_t total, double peak);

/// base * decay^(num_layers + 1 - depth); depth 0 is the embeddings and
/// num_layers + 1 the task head.
double layerwise_lr(std::size_t depth, std::size_t num_layers, double base, double decay);

/// AdamW over a fixed list of named parameters, each with its own lr scale.
template <typename T>
class AdamW {
 public:
  struct Slot {
    NamedParameter<T> param;
    double lr_scale = 1.0;
    std::vector<T> m;
    std::vector<T> v;
  };

  AdamW(std::vector<NamedParameter<T>> params, AdamWHyper hyper);

  /// Sets a per-parameter lr multiplier from its depth.
  void set_lr_scales(const std::vector<double>& scale_by_depth);

  /// Applies one update to every parameter with a gradient, then clears it.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const noexcept { return t_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }
  const AdamWHyper& hyper() const noexcept { return hyper_; }

  void save(CheckpointSection& section) const;
  void load(const CheckpointSection& section);

 private:
  std::vector<Slot> slots_;
  AdamWHyper hyper_;
  std::uint64_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace rtdforge
