#include "rtdforge/tensor.hpp"

#include <algorithm>
#include <bit>
#include <new>
#include <sstream>
#include <unordered_map>

#include "rtdforge/error.hpp"

namespace rtdforge {

namespace detail {

namespace {

constexpr std::size_t kPoolMinBytes = std::size_t{1} << 16;
constexpr std::size_t kPoolMaxCachedBytes = std::size_t{1} << 30;
constexpr std::align_val_t kAlignment{64};

thread_local bool cache_destroyed = false;

struct BlockCache {
  std::unordered_map<std::size_t, std::vector<void*>> free_blocks;
  std::size_t cached_bytes = 0;

  ~BlockCache() {
    for (auto& [bytes, blocks] : free_blocks) {
      for (void* p : blocks) {
        ::operator delete(p, kAlignment);
      }
    }
    cache_destroyed = true;
  }
};

// Rounds up to one of four classes per power of two so that blocks are reused
// across batches whose padded lengths differ.
std::size_t size_class(std::size_t bytes) {
  std::size_t step = std::bit_floor(bytes) >> 2;
  return (bytes + step - 1) / step * step;
}

BlockCache& block_cache() {
  thread_local BlockCache cache;
  return cache;
}

}  // namespace

void* pooled_allocate(std::size_t bytes) {
  if (bytes >= kPoolMinBytes) {
    bytes = size_class(bytes);
  }
  if (bytes >= kPoolMinBytes && !cache_destroyed) {
    BlockCache& cache = block_cache();
    auto it = cache.free_blocks.find(bytes);
    if (it != cache.free_blocks.end() && !it->second.empty()) {
      void* p = it->second.back();
      it->second.pop_back();
      cache.cached_bytes -= bytes;
      return p;
    }
  }
  return ::operator new(bytes, kAlignment);
}

void pooled_deallocate(void* p, std::size_t bytes) noexcept {
  if (bytes >= kPoolMinBytes) {
    bytes = size_class(bytes);
  }
  if (bytes >= kPoolMinBytes && !cache_destroyed) {
    BlockCache& cache = block_cache();
    if (cache.cached_bytes + bytes <= kPoolMaxCachedBytes) {
      try {
        cache.free_blocks[bytes].push_back(p);
        cache.cached_bytes += bytes;
        return;
      } catch (...) {
        // Fall through and release the block.
      }
    }
  }
  ::operator delete(p, kAlignment);
}

}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out << ',';
    }
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data.assign(values.begin(), values.end());
  storage_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return storage_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  storage_->requires_grad = value;
  if (!value) {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
  }
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (storage_->grad.empty()) {
    // Reading an absent gradient materializes zeros only for requires_grad
    // tensors; others keep reporting an empty buffer.
    if (!storage_->requires_grad) {
      return {};
    }
    storage_->ensure_grad();
  }
  return storage_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(storage_->shape, storage_->requires_grad);
  std::copy(storage_->data.begin(), storage_->data.end(), out.storage_->data.begin());
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace rtdforge
