#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tada {

/// Storage with SIMD alignment, so vectorised kernels sum in the same order on every run.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW shape. Non-spatial tensors use h = w = 1.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;

  [[nodiscard]] std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
           "," + std::to_string(w) + "]";
  }
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape4 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape4 shape, const std::vector<T>& data) : Tensor(shape, AlignedVector<T>(data.begin(), data.end())) {}
  Tensor(Shape4 shape, AlignedVector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  [[nodiscard]] const Shape4& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }
  [[nodiscard]] std::span<T> span() { return data_; }
  [[nodiscard]] std::span<const T> span() const { return data_; }
  [[nodiscard]] AlignedVector<T>& vec() { return data_; }
  [[nodiscard]] const AlignedVector<T>& vec() const { return data_; }

  [[nodiscard]] std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the start of sample n.
  T* sample(int n) { return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane(); }
  const T* sample(int n) const {
    return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{}); }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same(const Tensor& o, const char* what) const {
    if (!(shape_ == o.shape_)) {
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + o.shape_.str());
    }
  }

  template <class U>
  [[nodiscard]] Tensor<U> cast() const {
    AlignedVector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Copy of samples [begin, begin + count).
  [[nodiscard]] Tensor slice_batch(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n) {
      throw ShapeError("slice_batch out of range on " + shape_.str());
    }
    Shape4 s = shape_;
    s.n = count;
    const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
    AlignedVector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                       data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * per));
    return Tensor(s, std::move(out));
  }

  /// Writes `src` into samples starting at `begin`.
  void assign_batch(int begin, const Tensor& src) {
    if (src.shape_.c != shape_.c || src.shape_.h != shape_.h || src.shape_.w != shape_.w ||
        begin + src.shape_.n > shape_.n) {
      throw ShapeError("assign_batch: " + src.shape_.str() + " into " + shape_.str());
    }
    const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
    std::copy(src.data_.begin(), src.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(begin * per));
  }

  [[nodiscard]] static Tensor concat_batch(const Tensor& a, const Tensor& b) {
    if (a.shape_.c != b.shape_.c || a.shape_.h != b.shape_.h || a.shape_.w != b.shape_.w) {
      throw ShapeError("concat_batch: " + a.shape_.str() + " vs " + b.shape_.str());
    }
    Shape4 s = a.shape_;
    s.n += b.shape_.n;
    AlignedVector<T> out;
    out.reserve(s.size());
    out.insert(out.end(), a.data_.begin(), a.data_.end());
    out.insert(out.end(), b.data_.begin(), b.data_.end());
    return Tensor(s, std::move(out));
  }

 private:
  Shape4 shape_{};
  AlignedVector<T> data_;
};

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len,
                           std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace tada
