// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace cleandift {

/// Dense NCHW extents. Vectors and matrices use trailing singleton dims.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  constexpr std::int64_t numel() const {
    return std::int64_t(n) * c * h * w;
  }
  constexpr std::int64_t plane() const { return std::int64_t(h) * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << ',' << c << ',' << h << ',' << w << ']';
    return os.str();
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Allocator whose value-initialization is default-initialization, so
/// resize() on arithmetic types leaves memory unwritten. Blocks are 64-byte
/// aligned: vectorized kernels split work by address alignment, and a fixed
/// alignment keeps results bit-identical from one allocation to the next.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, DefaultInitAllocator<T>>;

  struct Uninitialized {};

  Tensor() = default;
  /// Storage left uninitialized; every element must be written before use.
  Tensor(Shape s, Uninitialized) : shape_(s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw ShapeError("negative extent in " + s.str());
    data_.resize(static_cast<std::size_t>(s.numel()));
  }
  explicit Tensor(Shape s, T fill = T(0))
      : shape_(s), data_(static_cast<std::size_t>(s.numel()), fill) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw ShapeError("negative extent in " + s.str());
  }
  Tensor(Shape s, const std::vector<T>& values) : shape_(s), data_(values.begin(), values.end()) {
    if (std::int64_t(data_.size()) != s.numel())
      throw ShapeError("value count does not match shape " + s.str());
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }

  /// Pointer to the start of sample `n`.
  T* sample(int n) { return data_.data() + std::int64_t(n) * sample_size(); }
  const T* sample(int n) const {
    return data_.data() + std::int64_t(n) * sample_size();
  }
  std::int64_t sample_size() const {
    return std::int64_t(shape_.c) * shape_.h * shape_.w;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.numel() != numel())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    Tensor out = *this;
    out.shape_ = s;
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return static_cast<std::size_t>(
        ((std::int64_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x);
  }

  Shape shape_{};
  Storage data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " +
                     b.str());
}

/// Extracts samples [begin, begin + count) along the batch axis.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& t, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > t.n())
    throw ShapeError("slice_batch out of range");
  Shape s = t.shape();
  s.n = count;
  Tensor<T> out(s);
  std::copy_n(t.sample(begin), out.numel(), out.data());
  return out;
}

/// Concatenates tensors of equal per-sample shape along the batch axis.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  s.n = 0;
  for (const auto& p : parts) {
    if (p.c() != s.c || p.h() != s.h || p.w() != s.w)
      throw ShapeError("stack_batch: per-sample shape mismatch");
    s.n += p.n();
  }
  Tensor<T> out(s);
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.numel(), dst);
  return out;
}

}  // namespace cleandift
