#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "qens/error.hpp"

namespace qens {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major tensor. Channels-first; spatial dims are always last.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("Tensor: extents " + shape_str(shape_) + " do not match data length " +
                       std::to_string(data_.size()));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T{}); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  void reshape(Shape s) {
    if (shape_numel(s) != data_.size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    shape_ = std::move(s);
  }
  Tensor reshaped(Shape s) const {
    Tensor t = *this;
    t.reshape(std::move(s));
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.size());
    std::transform(data_.begin(), data_.end(), d.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(d));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Tensor container file: "BNTENSR1", u8 dtype, u8 rank, u64 extents, payload.
// All integers little-endian. dtype 0=f32, 1=f64; 2=i32 and 3=u8 carry label
// and mask maps.
// ---------------------------------------------------------------------------

inline constexpr char kTensorMagic[8] = {'B', 'N', 'T', 'E', 'N', 'S', 'R', '1'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
  else static_assert(sizeof(T) == 0, "unsupported tensor dtype");
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype tag " + std::to_string(static_cast<int>(d)));
}

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("tensor: truncated header");
  return v;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, sizeof kTensorMagic);
  const auto tag = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(tag));
  os.put(static_cast<char>(rank));
  for (std::size_t e : t.shape()) detail::write_u64(os, e);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw IoError("tensor: write failed");
}

/// Reads one header and returns (dtype, shape) without the payload.
inline std::pair<DType, Shape> read_tensor_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8)) throw FormatError("tensor: truncated magic");
  if (std::memcmp(magic, kTensorMagic, 8) != 0) throw FormatError("tensor: bad magic");
  int tag = is.get();
  int rank = is.get();
  if (tag == EOF || rank == EOF) throw FormatError("tensor: truncated header");
  auto dt = static_cast<DType>(tag);
  dtype_size(dt);
  Shape s(static_cast<std::size_t>(rank));
  for (auto& e : s) e = detail::read_u64(is);
  return {dt, s};
}

/// Reads a tensor, converting between floating dtypes when needed.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  auto [dt, shape] = read_tensor_header(is);
  const std::size_t n = shape_numel(shape);
  auto read_as = [&](auto tag) {
    using S = decltype(tag);
    std::vector<S> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(S))))
      throw FormatError("tensor: truncated payload");
    std::vector<T> out(n);
    std::transform(raw.begin(), raw.end(), out.begin(), [](S v) { return static_cast<T>(v); });
    return Tensor<T>(shape, std::move(out));
  };
  switch (dt) {
    case DType::f32: return read_as(float{});
    case DType::f64: return read_as(double{});
    case DType::i32: return read_as(std::int32_t{});
    case DType::u8: return read_as(std::uint8_t{});
  }
  throw FormatError("tensor: unknown dtype");
}

}  // namespace qens
