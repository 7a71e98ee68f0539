#include "rtdforge/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "rtdforge/autodiff.hpp"
#include "rtdforge/error.hpp"

namespace rtdforge::ops {

namespace {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) {
    return false;
  }
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T, typename Fn>
void record(const Tensor<T>& out, Fn&& fn) {
  active_tape<T>()->record(out.storage(), std::forward<Fn>(fn));
}

// Row-major GEMM: C[m x n] = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

template <typename T>
bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) {
    return false;
  }
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
void check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix<T>(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  }
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int resolved = axis < 0 ? axis + r : axis;
  if (resolved < 0 || resolved >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(resolved);
}

std::size_t count_nonzero(std::span<const std::int32_t> mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.begin(), mask.end(), [](std::int32_t v) { return v != 0; }));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("add", a, b);
  const bool track = tracking({&a, &b});
  auto out = Tensor<T>::uninitialized(a.shape(), track);
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      po[i + j] = pa[i + j] + pb[j];
    }
  }
  if (track) {
    record(out, [a, b, out, n, inner]() {
      const T* g = out.storage()->grad.data();
      if (a.requires_grad()) {
        T* ga = a.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) {
            gb[j] += g[i + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("sub", a, b);
  const bool track = tracking({&a, &b});
  auto out = Tensor<T>::uninitialized(a.shape(), track);
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      out[i + j] = a[i + j] - b[j];
    }
  }
  if (track) {
    record(out, [a, b, out, n, inner]() {
      const T* g = out.storage()->grad.data();
      if (a.requires_grad()) {
        T* ga = a.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) {
            gb[j] -= g[i + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("mul", a, b);
  const bool track = tracking({&a, &b});
  auto out = Tensor<T>::uninitialized(a.shape(), track);
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      out[i + j] = a[i + j] * b[j];
    }
  }
  if (track) {
    record(out, [a, b, out, n, inner]() {
      const T* g = out.storage()->grad.data();
      if (a.requires_grad()) {
        T* ga = a.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) {
            ga[i + j] += g[i + j] * b[j];
          }
        }
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->ensure_grad();
        for (std::size_t i = 0; i < n; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) {
            gb[j] += g[i + j] * a[i + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const bool track = tracking({&a});
  auto out = Tensor<T>::uninitialized(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * factor;
  }
  if (track) {
    record(out, [a, out, n, factor]() {
      const T* g = out.storage()->grad.data();
      T* ga = a.storage()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += g[i] * factor;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const auto mismatch = [&]() {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  };
  if (a.rank() < 2 || b.rank() < 2) {
    throw mismatch();
  }
  const std::size_t k = a.shape().back();
  const std::size_t b_rows = b.dim(b.rank() - 2);
  const std::size_t b_cols = b.shape().back();
  const std::size_t bk = transpose_b ? b_cols : b_rows;
  const std::size_t n = transpose_b ? b_rows : b_cols;
  if (bk != k) {
    throw mismatch();
  }

  std::size_t batch = 1;
  std::size_t m = 0;
  bool broadcast_b = false;
  if (b.rank() == 2) {
    broadcast_b = true;
    m = a.numel() / k;
  } else {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw mismatch();
    }
    m = a.dim(a.rank() - 2);
    batch = a.numel() / (m * k);
  }

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  const bool track = tracking({&a, &b});
  auto out = Tensor<T>::uninitialized(std::move(out_shape), track);

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(false, transpose_b, m, n, k, T{1}, pa + i * m * k, pb + (broadcast_b ? 0 : i * k * n),
         T{0}, po + i * m * n);
  }

  if (track) {
    record(out, [a, b, out, batch, m, n, k, transpose_b, broadcast_b]() {
      const T* g = out.storage()->grad.data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      if (a.requires_grad()) {
        T* ga = a.storage()->ensure_grad();
        for (std::size_t i = 0; i < batch; ++i) {
          const T* bi = pb + (broadcast_b ? 0 : i * k * n);
          // dA = dC * op(B)^T
          gemm(false, !transpose_b, m, k, n, T{1}, g + i * m * n, bi, T{1}, ga + i * m * k);
        }
      }
      if (b.requires_grad()) {
        T* gb = b.storage()->ensure_grad();
        for (std::size_t i = 0; i < batch; ++i) {
          T* gbi = gb + (broadcast_b ? 0 : i * k * n);
          if (transpose_b) {
            // dB[n x k] = dC^T * A
            gemm(true, false, n, k, m, T{1}, g + i * m * n, pa + i * m * k, T{1}, gbi);
          } else {
            // dB[k x n] = A^T * dC
            gemm(true, false, k, n, m, T{1}, pa + i * m * k, g + i * m * n, T{1}, gbi);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t len = x.dim(ax);
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < x.rank(); ++d) {
    inner *= x.dim(d);
  }
  const std::size_t outer = x.numel() / (len * inner);
  const bool track = tracking({&x});
  auto out = Tensor<T>::uninitialized(x.shape(), track);
  const T* px = x.data().data();
  T* py = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) {
        peak = std::max(peak, px[base + i * inner]);
      }
      if (peak == -std::numeric_limits<T>::infinity()) {
        for (std::size_t i = 0; i < len; ++i) {
          py[base + i * inner] = T{0};
        }
        continue;
      }
      T total{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(px[base + i * inner] - peak);
        py[base + i * inner] = e;
        total += e;
      }
      const T inv = T{1} / total;
      for (std::size_t i = 0; i < len; ++i) {
        py[base + i * inner] *= inv;
      }
    }
  }
  if (track) {
    record(out, [x, out, outer, len, inner]() {
      const T* g = out.storage()->grad.data();
      const T* py = out.data().data();
      T* gx = x.storage()->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * len * inner + j;
          T dot{0};
          for (std::size_t i = 0; i < len; ++i) {
            dot += g[base + i * inner] * py[base + i * inner];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t idx = base + i * inner;
            gx[idx] += py[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double epsilon) {
  if (x.rank() == 0) {
    throw DimensionError("layer_norm on a scalar");
  }
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  if (!(epsilon > 0.0)) {
    throw ValueError("layer_norm: epsilon must be positive");
  }
  const std::size_t rows = x.numel() / width;
  const bool track = tracking({&x, &gain, &bias});
  auto out = Tensor<T>::uninitialized(x.shape(), track);
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  T* py = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * width;
    T mu{0};
    for (std::size_t i = 0; i < width; ++i) {
      mu += row[i];
    }
    mu /= static_cast<T>(width);
    T var{0};
    for (std::size_t i = 0; i < width; ++i) {
      const T d = row[i] - mu;
      var += d * d;
    }
    var /= static_cast<T>(width);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(epsilon));
    (*inv_std)[r] = rstd;
    for (std::size_t i = 0; i < width; ++i) {
      const T xhat = (row[i] - mu) * rstd;
      (*normalized)[r * width + i] = xhat;
      py[r * width + i] = xhat * pg[i] + pb[i];
    }
  }
  if (track) {
    record(out, [x, gain, bias, out, normalized, inv_std, rows, width]() {
      const T* g = out.storage()->grad.data();
      const T* xhat = normalized->data();
      if (gain.requires_grad()) {
        T* gg = gain.storage()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < width; ++i) {
            gg[i] += g[r * width + i] * xhat[r * width + i];
          }
        }
      }
      if (bias.requires_grad()) {
        T* gb = bias.storage()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < width; ++i) {
            gb[i] += g[r * width + i];
          }
        }
      }
      if (x.requires_grad()) {
        T* gx = x.storage()->ensure_grad();
        const T* pg = gain.data().data();
        const T inv_width = T{1} / static_cast<T>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d{0};
          T mean_dx{0};
          for (std::size_t i = 0; i < width; ++i) {
            const T d = g[r * width + i] * pg[i];
            mean_d += d;
            mean_dx += d * xhat[r * width + i];
          }
          mean_d *= inv_width;
          mean_dx *= inv_width;
          const T rstd = (*inv_std)[r];
          for (std::size_t i = 0; i < width; ++i) {
            const T d = g[r * width + i] * pg[i];
            gx[r * width + i] += rstd * (d - mean_d - xhat[r * width + i] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const bool track = tracking({&x});
  auto out = Tensor<T>::uninitialized(x.shape(), track);
  const std::size_t n = x.numel();
  constexpr T kInvSqrt2 = static_cast<T>(0.70710678118654752440);
  // The backward pass reuses the forward CDF.
  std::shared_ptr<std::vector<T>> cdf;
  if (track) cdf = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T c = T{0.5} * (T{1} + std::erf(v * kInvSqrt2));
    if (cdf) (*cdf)[i] = c;
    out[i] = v * c;
  }
  if (track) {
    record(out, [x, out, n, cdf]() {
      const T kInvSqrt2Pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
      const T* g = out.storage()->grad.data();
      T* gx = x.storage()->ensure_grad();
      const T* c = cdf->data();
      for (std::size_t i = 0; i < n; ++i) {
        const T v = x[i];
        const T pdf = kInvSqrt2Pi * std::exp(T{-0.5} * v * v);
        gx[i] += g[i] * (c[i] + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                    std::int32_t ignore_index) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy_from_logits expects [N, V] logits, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (std::int32_t t : targets) {
    if (t == ignore_index) {
      continue;
    }
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy_from_logits: target " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) {
    throw ValueError("no loss positions");
  }
  const bool track = tracking({&logits});
  Tensor<T> out(Shape{}, track);
  auto probs = std::make_shared<std::vector<T>>(track ? rows * vocab : 0);
  const T* px = logits.data().data();
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) {
      continue;
    }
    const T* row = px + r * vocab;
    const T peak = *std::max_element(row, row + vocab);
    const T target_logit = row[targets[r]];
    if (std::isinf(peak) && peak > 0) {
      // Infinite margin: the distribution is one-hot on the infinite entries.
      total += (target_logit == peak) ? T{0} : std::numeric_limits<T>::infinity();
      if (track) {
        for (std::size_t v = 0; v < vocab; ++v) {
          (*probs)[r * vocab + v] = (row[v] == peak) ? T{1} : T{0};
        }
      }
      continue;
    }
    T z{0};
    for (std::size_t v = 0; v < vocab; ++v) {
      z += std::exp(row[v] - peak);
    }
    total += peak + std::log(z) - target_logit;
    if (track) {
      const T inv = T{1} / z;
      for (std::size_t v = 0; v < vocab; ++v) {
        (*probs)[r * vocab + v] = std::exp(row[v] - peak) * inv;
      }
    }
  }
  out[0] = total / static_cast<T>(count);
  if (track) {
    std::vector<std::int32_t> kept(targets.begin(), targets.end());
    record(out, [logits, out, probs, kept = std::move(kept), rows, vocab, count, ignore_index]() {
      const T g = out.storage()->grad[0] / static_cast<T>(count);
      T* gx = logits.storage()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (kept[r] == ignore_index) {
          continue;
        }
        for (std::size_t v = 0; v < vocab; ++v) {
          gx[r * vocab + v] += g * (*probs)[r * vocab + v];
        }
        gx[r * vocab + static_cast<std::size_t>(kept[r])] -= g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> binary_cross_entropy_from_logits(const Tensor<T>& logits, const Tensor<T>& labels,
                                           std::span<const std::int32_t> mask) {
  const std::size_t n = logits.numel();
  if (labels.numel() != n || mask.size() != n) {
    throw DimensionError("binary_cross_entropy_from_logits: logits " + shape_str(logits.shape()) +
                         ", labels " + shape_str(labels.shape()) + ", mask of " +
                         std::to_string(mask.size()));
  }
  const std::size_t count = count_nonzero(mask);
  if (count == 0) {
    throw ValueError("no loss positions");
  }
  const bool track = tracking({&logits});
  Tensor<T> out(Shape{}, track);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0) {
      continue;
    }
    const T x = logits[i];
    const T y = labels[i];
    // y * softplus(-x) + (1 - y) * softplus(x), each written overflow-free.
    const T pos = std::max(-x, T{0});
    const T neg = std::max(x, T{0});
    const T tail = std::log1p(std::exp(-std::abs(x)));
    total += y * (pos + tail) + (T{1} - y) * (neg + tail);
  }
  out[0] = total / static_cast<T>(count);
  if (track) {
    std::vector<std::int32_t> kept(mask.begin(), mask.end());
    record(out, [logits, labels, out, kept = std::move(kept), n, count]() {
      const T g = out.storage()->grad[0] / static_cast<T>(count);
      T* gx = logits.storage()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (kept[i] == 0) {
          continue;
        }
        const T x = logits[i];
        const T sigma = x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
        gx[i] += g * (sigma - labels[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& predictions, std::span<const T> targets) {
  const std::size_t n = predictions.numel();
  if (targets.size() != n) {
    throw DimensionError("mse_loss: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(predictions.shape()));
  }
  if (n == 0) {
    throw ValueError("no loss positions");
  }
  const bool track = tracking({&predictions});
  Tensor<T> out(Shape{}, track);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = predictions[i] - targets[i];
    total += d * d;
  }
  out[0] = total / static_cast<T>(n);
  if (track) {
    std::vector<T> kept(targets.begin(), targets.end());
    record(out, [predictions, out, kept = std::move(kept), n]() {
      const T g = out.storage()->grad[0] * T{2} / static_cast<T>(n);
      T* gx = predictions.storage()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += g * (predictions[i] - kept[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                           const Shape& leading) {
  if (table.rank() != 2) {
    throw DimensionError("embedding_lookup expects a [V, E] table, got " +
                         shape_str(table.shape()));
  }
  if (shape_numel(leading) != ids.size()) {
    throw DimensionError("embedding_lookup: " + std::to_string(ids.size()) +
                         " ids do not fill shape " + shape_str(leading));
  }
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
  }
  Shape out_shape = leading;
  out_shape.push_back(width);
  const bool track = tracking({&table});
  auto out = Tensor<T>::uninitialized(std::move(out_shape), track);
  const T* pt = table.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * width, width, po + i * width);
  }
  if (track) {
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    record(out, [table, out, kept = std::move(kept), width]() {
      const T* g = out.storage()->grad.data();
      T* gt = table.storage()->ensure_grad();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        T* row = gt + static_cast<std::size_t>(kept[i]) * width;
        for (std::size_t j = 0; j < width; ++j) {
          row[j] += g[i * width + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng* rng, bool training) {
  if (!training || rate <= 0.0) {
    return x;
  }
  if (rate >= 1.0) {
    throw ValueError("dropout rate must be < 1");
  }
  if (rng == nullptr) {
    throw ValueError("dropout in training mode needs an RNG");
  }
  const std::size_t n = x.numel();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto keep = std::make_shared<std::vector<T>>(n);
  // One engine draw keys a SplitMix64 counter stream; each output gives two
  // 32-bit decisions.
  const auto threshold = static_cast<std::uint64_t>(std::ceil(rate * 4294967296.0));
  const std::uint64_t key = rng->next_u64();
  for (std::size_t i = 0; i < n; i += 2) {
    std::uint64_t bits = key + 0x9e3779b97f4a7c15ULL * (i / 2 + 1);
    bits = (bits ^ (bits >> 30)) * 0xbf58476d1ce4e5b9ULL;
    bits = (bits ^ (bits >> 27)) * 0x94d049bb133111ebULL;
    bits ^= bits >> 31;
    (*keep)[i] = (bits >> 32) >= threshold ? keep_scale : T{0};
    if (i + 1 < n) {
      (*keep)[i + 1] = (bits & 0xffffffffu) >= threshold ? keep_scale : T{0};
    }
  }
  const bool track = tracking({&x});
  auto out = Tensor<T>::uninitialized(x.shape(), track);
  const T* px = x.data().data();
  T* po = out.data().data();
  const T* pk = keep->data();
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = px[i] * pk[i];
  }
  if (track) {
    record(out, [x, out, keep, n]() {
      const T* g = out.storage()->grad.data();
      T* gx = x.storage()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += g[i] * (*keep)[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool track = tracking({&x});
  auto out = Tensor<T>::uninitialized(std::move(shape), track);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (track) {
    record(out, [x, out]() {
      const T* g = out.storage()->grad.data();
      T* gx = x.storage()->ensure_grad();
      for (std::size_t i = 0; i < x.numel(); ++i) {
        gx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= x.rank() || axis1 >= x.rank()) {
    throw DimensionError("transpose axes out of range for " + shape_str(x.shape()));
  }
  if (axis0 == axis1) {
    return x;
  }
  if (axis0 > axis1) {
    std::swap(axis0, axis1);
  }
  const Shape& s = x.shape();
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis0; ++d) {
    outer *= s[d];
  }
  std::size_t middle = 1;
  for (std::size_t d = axis0 + 1; d < axis1; ++d) {
    middle *= s[d];
  }
  std::size_t inner = 1;
  for (std::size_t d = axis1 + 1; d < s.size(); ++d) {
    inner *= s[d];
  }
  const std::size_t d0 = s[axis0];
  const std::size_t d1 = s[axis1];
  Shape out_shape = s;
  std::swap(out_shape[axis0], out_shape[axis1]);

  // Visits every (input offset, output offset) block of `inner` contiguous values.
  const auto for_each_block = [=](auto&& fn) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < d0; ++i) {
        for (std::size_t m = 0; m < middle; ++m) {
          for (std::size_t j = 0; j < d1; ++j) {
            const std::size_t src = (((o * d0 + i) * middle + m) * d1 + j) * inner;
            const std::size_t dst = (((o * d1 + j) * middle + m) * d0 + i) * inner;
            fn(src, dst);
          }
        }
      }
    }
  };

  const bool track = tracking({&x});
  auto out = Tensor<T>::uninitialized(std::move(out_shape), track);
  const T* px = x.data().data();
  T* po = out.data().data();
  for_each_block([&](std::size_t src, std::size_t dst) { std::copy_n(px + src, inner, po + dst); });
  if (track) {
    record(out, [x, out, for_each_block, inner]() {
      const T* g = out.storage()->grad.data();
      T* gx = x.storage()->ensure_grad();
      for_each_block([&](std::size_t src, std::size_t dst) {
        for (std::size_t c = 0; c < inner; ++c) {
          gx[src + c] += g[dst + c];
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool track = tracking({&x});
  Tensor<T> out(Shape{}, track);
  T total{0};
  for (T v : x.data()) {
    total += v;
  }
  out[0] = total;
  if (track) {
    record(out, [x, out]() {
      const T g = out.storage()->grad[0];
      T* gx = x.storage()->ensure_grad();
      for (std::size_t i = 0; i < x.numel(); ++i) {
        gx[i] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) {
    throw ValueError("mean of an empty tensor");
  }
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mask_attention_keys(const Tensor<T>& scores, std::span<const std::int32_t> key_mask) {
  if (scores.rank() != 4) {
    throw DimensionError("mask_attention_keys expects [B, H, Lq, Lk], got " +
                         shape_str(scores.shape()));
  }
  const std::size_t batch = scores.dim(0);
  const std::size_t rows = scores.dim(1) * scores.dim(2);
  const std::size_t keys = scores.dim(3);
  if (key_mask.size() != batch * keys) {
    throw DimensionError("mask_attention_keys: mask of " + std::to_string(key_mask.size()) +
                         " for scores " + shape_str(scores.shape()));
  }
  const bool track = tracking({&scores});
  auto out = Tensor<T>::uninitialized(scores.shape(), track);
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t* mb = key_mask.data() + b * keys;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = (b * rows + r) * keys;
      for (std::size_t k = 0; k < keys; ++k) {
        out[base + k] = mb[k] != 0 ? scores[base + k] : neg_inf;
      }
    }
  }
  if (track) {
    std::vector<std::int32_t> kept(key_mask.begin(), key_mask.end());
    record(out, [scores, out, kept = std::move(kept), batch, rows, keys]() {
      const T* g = out.storage()->grad.data();
      T* gs = scores.storage()->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = (b * rows + r) * keys;
          for (std::size_t k = 0; k < keys; ++k) {
            if (kept[b * keys + k] != 0) {
              gs[base + k] += g[base + k];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::int32_t> mask) {
  if (x.rank() != 3) {
    throw DimensionError("masked_mean_pool expects [B, L, H], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.dim(1);
  const std::size_t width = x.dim(2);
  if (mask.size() != batch * len) {
    throw DimensionError("masked_mean_pool: mask of " + std::to_string(mask.size()) +
                         " for " + shape_str(x.shape()));
  }
  std::vector<T> inv_counts(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t c = count_nonzero(mask.subspan(b * len, len));
    if (c == 0) {
      throw ValueError("masked_mean_pool: sequence " + std::to_string(b) + " is all padding");
    }
    inv_counts[b] = T{1} / static_cast<T>(c);
  }
  const bool track = tracking({&x});
  Tensor<T> out(Shape{batch, width}, track);
  for (std::size_t b = 0; b < batch; ++b) {
    T* row = out.data().data() + b * width;
    for (std::size_t l = 0; l < len; ++l) {
      if (mask[b * len + l] == 0) {
        continue;
      }
      const T* src = x.data().data() + (b * len + l) * width;
      for (std::size_t h = 0; h < width; ++h) {
        row[h] += src[h];
      }
    }
    for (std::size_t h = 0; h < width; ++h) {
      row[h] *= inv_counts[b];
    }
  }
  if (track) {
    std::vector<std::int32_t> kept(mask.begin(), mask.end());
    record(out, [x, out, kept = std::move(kept), inv_counts = std::move(inv_counts), batch, len,
                 width]() {
      const T* g = out.storage()->grad.data();
      T* gx = x.storage()->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t l = 0; l < len; ++l) {
          if (kept[b * len + l] == 0) {
            continue;
          }
          for (std::size_t h = 0; h < width; ++h) {
            gx[(b * len + l) * width + h] += g[b * width + h] * inv_counts[b];
          }
        }
      }
    });
  }
  return out;
}

#define RTDFORGE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                           \
  template Tensor<T> softmax(const Tensor<T>&, int);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);   \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> cross_entropy_from_logits(const Tensor<T>&, std::span<const std::int32_t>,  \
                                               std::int32_t);                                    \
  template Tensor<T> binary_cross_entropy_from_logits(const Tensor<T>&, const Tensor<T>&,        \
                                                      std::span<const std::int32_t>);            \
  template Tensor<T> mse_loss(const Tensor<T>&, std::span<const T>);                             \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int32_t>,           \
                                      const Shape&);                                             \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng*, bool);                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> mask_attention_keys(const Tensor<T>&, std::span<const std::int32_t>);       \
  template Tensor<T> masked_mean_pool(const Tensor<T>&, std::span<const std::int32_t>);

RTDFORGE_INSTANTIATE_OPS(float)
RTDFORGE_INSTANTIATE_OPS(double)

#undef RTDFORGE_INSTANTIATE_OPS

}  // namespace rtdforge::ops
