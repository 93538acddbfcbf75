#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace musc {

using Shape = std::vector<std::size_t>;

/// Raised for malformed or unreadable tensor/checkpoint/image files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& dims);

/// Dense row-major array of rank 1 to 4.
///
/// Values are checked for finiteness when a tensor is built from external
/// data and when it crosses a file boundary. Arithmetic on an existing
/// tensor goes through the accessors below and is the caller's business.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape dims);
  BasicTensor(Shape dims, std::vector<T> values);
  BasicTensor(Shape dims, T fill);

  static BasicTensor zeros(Shape dims) { return BasicTensor(std::move(dims)); }
  /// Rank-2 tensor from nested rows; convenient in tests.
  static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows);

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  T& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * dims_[1] + i) * dims_[2] + j];
  }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * dims_[1] + i) * dims_[2] + j];
  }
  T& at(std::size_t m, std::size_t c, std::size_t i, std::size_t j) {
    return data_[((m * dims_[1] + c) * dims_[2] + i) * dims_[3] + j];
  }
  const T& at(std::size_t m, std::size_t c, std::size_t i, std::size_t j) const {
    return data_[((m * dims_[1] + c) * dims_[2] + i) * dims_[3] + j];
  }

  /// Pointer to the start of channel/slab `c` along the leading axis.
  T* slab(std::size_t c) { return data_.data() + c * (data_.size() / dims_[0]); }
  const T* slab(std::size_t c) const { return data_.data() + c * (data_.size() / dims_[0]); }

  BasicTensor reshaped(Shape dims) const;

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> t(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  BasicTensor& operator+=(const BasicTensor& other);
  BasicTensor& operator-=(const BasicTensor& other);
  BasicTensor& operator*=(T s);
  /// this += s * x
  BasicTensor& axpy(T s, const BasicTensor& x);

  void fill(T v);
  bool all_finite() const;
  /// Throws std::domain_error naming `what` when a NaN/Inf is present.
  void require_finite(const std::string& what) const;

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Shape dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename T>
BasicTensor<T> operator+(BasicTensor<T> a, const BasicTensor<T>& b) {
  a += b;
  return a;
}
template <typename T>
BasicTensor<T> operator-(BasicTensor<T> a, const BasicTensor<T>& b) {
  a -= b;
  return a;
}
template <typename T>
BasicTensor<T> operator*(T s, BasicTensor<T> a) {
  a *= s;
  return a;
}

std::size_t shape_product(const Shape& dims);
void require_same_shape(const Shape& a, const Shape& b, const char* what);

/// Kronecker product of two rank-2 tensors.
template <typename T>
BasicTensor<T> kron(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Inner product accumulated in double.
template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
double squared_norm(const BasicTensor<T>& a);

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// NTF: "NTF1", u32 rank, rank x u32 dims, f32 payload, all little-endian.
/// Double tensors are narrowed to f32 on write.
template <typename T>
void write_ntf(std::ostream& out, const BasicTensor<T>& t);
template <typename T>
BasicTensor<T> read_ntf(std::istream& in);
template <typename T>
void write_ntf(const std::filesystem::path& path, const BasicTensor<T>& t);
template <typename T>
BasicTensor<T> read_ntf(const std::filesystem::path& path);

/// Binary P5 PGM, min-max normalized to 0..255; a constant image maps to 128.
template <typename T>
void export_pgm(const BasicTensor<T>& image, const std::filesystem::path& path);

}  // namespace musc
