#include "rtdforge/optim.hpp"

#include <cmath>

#include "rtdforge/error.hpp"

namespace rtdforge {

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t t, double lr, const AdamWHyper& h, bool apply_decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adamw_update: parameter, gradient and moment sizes differ");
  }
  if (t == 0) {
    throw ValueError("adamw_update: step counter is 1-based");
  }
  const double td = static_cast<double>(t);
  const double c1 = 1.0 - std::pow(h.beta1, td);
  const double c2 = 1.0 - std::pow(h.beta2, td);
  const double decay = apply_decay ? lr * h.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double p = param[i];
    p -= decay * p;
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    p -= lr * (mi / c1) / (std::sqrt(vi / c2) + h.epsilon);
    param[i] = static_cast<T>(p);
  }
}

double lr_at(std::uint64_t step, std::uint64_t warmup, std::uint64_t total, double peak) {
  if (step > total) {
    throw ValueError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                     std::to_string(total));
  }
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total == warmup) {
    return step == total ? 0.0 : peak;
  }
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

double layerwise_lr(std::size_t depth, std::size_t num_layers, double base, double decay) {
  if (depth > num_layers + 1) {
    throw ValueError("layerwise_lr: depth " + std::to_string(depth) + " beyond head depth " +
                     std::to_string(num_layers + 1));
  }
  double lr = base;
  for (std::size_t i = depth; i < num_layers + 1; ++i) {
    lr *= decay;
  }
  return lr;
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParameter<T>> params, AdamWHyper hyper) : hyper_(hyper) {
  slots_.reserve(params.size());
  for (NamedParameter<T>& p : params) {
    Slot s;
    s.m.assign(p.tensor.numel(), T{0});
    s.v.assign(p.tensor.numel(), T{0});
    s.param = std::move(p);
    slots_.push_back(std::move(s));
  }
}

template <typename T>
void AdamW<T>::set_lr_scales(const std::vector<double>& scale_by_depth) {
  for (Slot& s : slots_) {
    if (s.param.depth >= scale_by_depth.size()) {
      throw ValueError("no lr scale for depth " + std::to_string(s.param.depth) + " (" + s.param.name + ")");
    }
    s.lr_scale = scale_by_depth[s.param.depth];
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  for (Slot& s : slots_) {
    Tensor<T>& p = s.param.tensor;
    if (!p.has_grad()) {
      continue;
    }
    adamw_update<T>(p.data(), p.grad(), s.m, s.v, t_, lr * s.lr_scale, hyper_, s.param.weight_decay);
  }
  zero_grad();
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (Slot& s : slots_) {
    s.param.tensor.zero_grad();
  }
}

template <typename T>
void AdamW<T>::save(CheckpointSection& section) const {
  section.text = "step=" + std::to_string(t_) + "\n";
  for (const Slot& s : slots_) {
    CheckpointTensor m{s.param.name + "/m", s.param.tensor.shape(), {s.m.begin(), s.m.end()}};
    CheckpointTensor v{s.param.name + "/v", s.param.tensor.shape(), {s.v.begin(), s.v.end()}};
    section.tensors.push_back(std::move(m));
    section.tensors.push_back(std::move(v));
  }
}

template <typename T>
void AdamW<T>::load(const CheckpointSection& section) {
  const std::string prefix = "step=";
  if (section.text.rfind(prefix, 0) != 0) {
    throw DataError("optimizer section lacks a step counter");
  }
  t_ = std::stoull(section.text.substr(prefix.size()));
  for (Slot& s : slots_) {
    const CheckpointTensor* m = section.find(s.param.name + "/m");
    const CheckpointTensor* v = section.find(s.param.name + "/v");
    if (m == nullptr || v == nullptr) {
      throw DataError("optimizer state missing for " + s.param.name);
    }
    if (m->data.size() != s.m.size() || v->data.size() != s.v.size()) {
      throw DataError("optimizer state size mismatch for " + s.param.name);
    }
    std::copy(m->data.begin(), m->data.end(), s.m.begin());
    std::copy(v->data.begin(), v->data.end(), s.v.begin());
  }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::uint64_t, double, const AdamWHyper&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::uint64_t, double, const AdamWHyper&, bool);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace rtdforge
