#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rtdforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {
// Large blocks are recycled through a per-thread cache instead of going back
// to the system allocator, which would unmap and re-fault them every step.
void* pooled_allocate(std::size_t bytes);
void pooled_deallocate(void* p, std::size_t bytes) noexcept;
}  // namespace detail

template <typename T>
struct PooledAllocator {
  using value_type = T;

  PooledAllocator() noexcept = default;
  template <typename U>
  PooledAllocator(const PooledAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(detail::pooled_allocate(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { detail::pooled_deallocate(p, n * sizeof(T)); }

  // Default-initialises on resize so that outputs about to be overwritten
  // are not zero-filled first.
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  friend bool operator==(const PooledAllocator&, const PooledAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, PooledAllocator<T>>;
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  void accumulate_grad(std::size_t index, T value) {
    ensure_grad();
    grad[index] += value;
  }

  T* ensure_grad() {
    if (grad.empty()) {
      grad.assign(data.size(), T{0});
    }
    return grad.data();
  }
};

/// Dense row-major n-d array with optional gradient tape participation.
///
/// A Tensor is a handle: copies alias the same storage. This is what lets a
/// single embedding table be read by several networks while receiving one
/// accumulated gradient. Use `clone()` for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : storage_(std::make_shared<TensorStorage<T>>()) {
    storage_->data.assign(shape_numel(shape), T{0});
    storage_->shape = std::move(shape);
    storage_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  /// Contents unspecified; for outputs that are written in full before use.
  static Tensor uninitialized(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.storage_ = std::make_shared<TensorStorage<T>>();
    t.storage_->data.resize(shape_numel(shape));
    t.storage_->shape = std::move(shape);
    t.storage_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
    return t;
  }

  bool defined() const noexcept { return storage_ != nullptr; }

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t numel() const { return storage_->data.size(); }

  std::span<T> data() { return storage_->data; }
  std::span<const T> data() const { return storage_->data; }

  T item() const;
  T& operator[](std::size_t i) { return storage_->data[i]; }
  const T& operator[](std::size_t i) const { return storage_->data[i]; }

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !storage_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad() { return {storage_->ensure_grad(), numel()}; }
  void zero_grad();

  bool shares_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

  Tensor clone() const;

  const std::shared_ptr<TensorStorage<T>>& storage() const noexcept { return storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Converts element type; result is a fresh leaf with the same requires_grad.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(values), t.requires_grad());
}

}  // namespace rtdforge
