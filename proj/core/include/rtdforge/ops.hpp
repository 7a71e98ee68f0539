#pragma once

#include <cstdint>
#include <span>

#include "rtdforge/rng.hpp"
#include "rtdforge/tensor.hpp"

/// Differentiable tensor operations. Each op records a backward closure on
/// the active tape (see autodiff.hpp) whenever any input requires a gradient.
/// Every loss uses the MEAN reduction over its loss positions.
namespace rtdforge::ops {

// Elementwise. `b` may equal `a` in shape or match a trailing suffix of it,
// in which case it is broadcast over the leading dimensions (bias add).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// a[..., m, k] x b[k, n] (b broadcast over a's leading dims) or
/// a[..., m, k] x b[..., k, n] with identical leading dims.
/// With `transpose_b`, b is stored as [..., n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// Numerically stable softmax along `axis` (negative counts from the end).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

/// Standardizes over the last axis then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double epsilon);

/// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Mean of -log softmax(logits)[target] over rows whose target differs from
/// `ignore_index`. logits: [N, V].
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                    std::int32_t ignore_index = -100);

/// Mean sigmoid BCE over positions with mask != 0, in the stable
/// relu(+-x) + log1p(exp(-|x|)) form. `labels` holds {0, 1} and has the shape
/// of `logits`; `mask` has numel(logits) entries.
template <typename T>
Tensor<T> binary_cross_entropy_from_logits(const Tensor<T>& logits, const Tensor<T>& labels,
                                           std::span<const std::int32_t> mask);

/// Mean squared error against constant targets.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& predictions, std::span<const T> targets);

/// Rows of table[V, E] selected by ids; result shape is `leading` + [E].
/// Backward scatter-adds into the table gradient.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                           const Shape& leading);

/// Inverted dropout. Identity (same handle) when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng* rng, bool training);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Swaps two axes (materialized copy).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// scores[B, H, Lq, Lk]: keys whose key_mask[b * Lk + k] == 0 get -inf.
template <typename T>
Tensor<T> mask_attention_keys(const Tensor<T>& scores, std::span<const std::int32_t> key_mask);

/// x[B, L, H] averaged over positions with mask[b * L + l] != 0 -> [B, H].
/// Divides by the true non-pad count.
template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::int32_t> mask);

}  // namespace rtdforge::ops
