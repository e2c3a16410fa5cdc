// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssnas/errors.hpp"

namespace ssnas {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Images are laid out N x C x H x W.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != shape_numel(shape_))
      throw StructuralError("tensor data size " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index numel() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(Index n, Index c, Index h, Index w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(Index n, Index c, Index h, Index w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  T& at(Index r, Index c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
  const T& at(Index r, Index c) const { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape s) {
    if (shape_numel(s) != numel())
      throw StructuralError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Rows [first, first + count) of the leading axis, copied.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& t, Index first, Index count) {
  Shape s = t.shape();
  const Index row = t.numel() / std::max<Index>(s[0], 1);
  s[0] = count;
  Tensor<T> out(s);
  std::copy_n(t.data() + first * row, count * row, out.data());
  return out;
}

/// Gathers leading-axis rows by index.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> idx) {
  Shape s = t.shape();
  const Index row = s.empty() || s[0] == 0 ? 0 : t.numel() / s[0];
  s[0] = static_cast<Index>(idx.size());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data() + static_cast<Index>(idx[i]) * row, row, out.data() + static_cast<Index>(i) * row);
  return out;
}

/// Order-sensitive FNV-style checksum over the raw bytes of a tensor.
template <class T>
std::uint64_t checksum(std::span<const T> v, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < v.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ssnas
