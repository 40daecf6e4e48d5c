#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <new>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace busu {

// Error taxonomy. Every failure the library reports derives from Error so the
// CLI can turn it into a single-line diagnostic.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ParameterError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};
struct IngestionError : Error {
  using Error::Error;
};

template <class T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

/// Cache-line aligned storage, so vectorized kernels see the same alignment
/// on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of reals. Image tensors use (batch, channels, height,
/// width) order.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  template <Real U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }

  Shape shape_;
  Buffer<T> data_;
};

// ---------------------------------------------------------------------------
// BTEN binary format: "BTEN", u8 version (1), u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 little-endian extents, then little-endian row-major elements.

inline constexpr std::uint8_t kBtenVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <Real T>
constexpr DType dtype_of() {
  return std::same_as<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
bool get_le(std::istream& is, U& v) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  std::memcpy(&v, buf, sizeof(U));
  return true;
}

}  // namespace detail

template <Real T>
void write_bten(std::ostream& os, const Tensor<T>& t) {
  os.write("BTEN", 4);
  detail::put_le<std::uint8_t>(os, kBtenVersion);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) detail::put_le<std::uint64_t>(os, e);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (T v : t.data()) detail::put_le<T>(os, v);
  }
  if (!os) throw FormatError("BTEN write failed");
}

/// Header of a BTEN record, readable without committing to a precision.
struct BtenHeader {
  DType dtype{};
  Shape shape;
};

inline BtenHeader read_bten_header(std::istream& is, const std::string& what = "tensor") {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError(what + ": truncated BTEN header");
  if (std::memcmp(magic, "BTEN", 4) != 0) throw FormatError(what + ": bad BTEN magic");
  std::uint8_t version = 0, dtype = 0, rank = 0;
  if (!detail::get_le(is, version) || !detail::get_le(is, dtype) || !detail::get_le(is, rank))
    throw FormatError(what + ": truncated BTEN header");
  if (version != kBtenVersion) throw FormatError(what + ": unsupported BTEN version " + std::to_string(version));
  if (dtype > 1) throw FormatError(what + ": unknown BTEN dtype " + std::to_string(dtype));
  BtenHeader h;
  h.dtype = static_cast<DType>(dtype);
  for (std::uint8_t i = 0; i < rank; ++i) {
    std::uint64_t e = 0;
    if (!detail::get_le(is, e)) throw FormatError(what + ": truncated BTEN extents");
    if (e == 0) throw FormatError(what + ": zero extent in BTEN shape");
    h.shape.push_back(static_cast<std::size_t>(e));
  }
  return h;
}

template <Real T>
Tensor<T> read_bten_payload(std::istream& is, const BtenHeader& h, const std::string& what = "tensor") {
  if (h.dtype != dtype_of<T>())
    throw FormatError(what + ": precision mismatch, stored " + dtype_name(h.dtype) + " but requested " +
                      dtype_name(dtype_of<T>()));
  std::vector<T> data(shape_size(h.shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T))))
      throw FormatError(what + ": truncated BTEN payload");
  } else {
    for (auto& v : data)
      if (!detail::get_le(is, v)) throw FormatError(what + ": truncated BTEN payload");
  }
  return Tensor<T>(h.shape, std::move(data));
}

template <Real T>
Tensor<T> read_bten(std::istream& is, const std::string& what = "tensor") {
  auto h = read_bten_header(is, what);
  return read_bten_payload<T>(is, h, what);
}

template <Real T>
void save_bten(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_bten(os, t);
}

template <Real T>
Tensor<T> load_bten(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_bten<T>(is, path);
}

}  // namespace busu
