// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uses2 {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::int64_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

// Leaves new elements default-initialized (indeterminate for arithmetic
// types) unless a value is given.
template <typename T>
struct UninitializedAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = UninitializedAllocator<U>;
  };
  UninitializedAllocator() = default;
  template <typename U>
  UninitializedAllocator(const UninitializedAllocator<U>&) {}
  template <typename U>
  bool operator==(const UninitializedAllocator<U>&) const noexcept {
    return true;
  }

    // Fixed alignment: vectorized kernels split work at alignment boundaries,
  // so results must not depend on where the heap happened to place a buffer.
  static constexpr std::size_t kAlignment = 64;
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlignment}); }

  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

// Dense row-major tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, UninitializedAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(NumElements(shape_), fill) {
    CheckShape();
  }
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    CheckSize();
  }
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    CheckSize();
  }

  // Contents are indeterminate until written.
  static Tensor Uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.CheckShape();
    t.data_.resize(NumElements(t.shape_));
#ifdef USES2_POISON_UNINITIALIZED
    std::fill(t.data_.begin(), t.data_.end(), std::numeric_limits<T>::quiet_NaN());
#endif
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const {
    return shape_.at(i < 0 ? shape_.size() + i : i);
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  T& operator[](std::int64_t i) { return data_[i]; }
  const T& operator[](std::int64_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[Offset({static_cast<std::int64_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[Offset({static_cast<std::int64_t>(idx)...})];
  }

  Tensor Reshaped(Shape shape) const {
    if (NumElements(shape) != numel())
      throw Error("cannot reshape " + ShapeString(shape_) + " to " +
                  ShapeString(shape));
    return Tensor(std::move(shape), data_);
  }

  void Fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> Cast() const {
    return Tensor<U>(shape_, typename Tensor<U>::Storage(data_.begin(), data_.end()));
  }
  std::vector<T> ToVector() const { return {data_.begin(), data_.end()}; }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  void CheckShape() const {
    for (auto d : shape_)
      if (d < 0) throw Error("negative dimension in " + ShapeString(shape_));
  }
  void CheckSize() const {
    if (static_cast<std::int64_t>(data_.size()) != NumElements(shape_))
      throw Error("tensor data size " + std::to_string(data_.size()) +
                  " does not match shape " + ShapeString(shape_));
  }

  std::int64_t Offset(std::initializer_list<std::int64_t> idx) const {
    std::int64_t off = 0;
    size_t k = 0;
    for (auto i : idx) off = off * shape_[k++] + i;
    return off;
  }

  Shape shape_;
  Storage data_;
};

}  // namespace uses2
