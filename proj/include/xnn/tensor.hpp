#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "xnn/common.hpp"

namespace xnn {

/// Dense rank-generic tensor of f64: K spatial axes followed by one channel
/// axis, row-major.  Values are immutable in spirit; ops return new tensors.
class Tensor {
 public:
  Tensor() : shape_{1}, spatial_rank_(0), data_(1, 0.0) {}

  Tensor(std::vector<std::size_t> shape, int spatial_rank)
      : shape_(std::move(shape)), spatial_rank_(spatial_rank) {
    check_shape();
    data_.assign(numel_from_shape(), 0.0);
  }

  Tensor(std::vector<std::size_t> shape, int spatial_rank, std::vector<double> data)
      : shape_(std::move(shape)), spatial_rank_(spatial_rank), data_(std::move(data)) {
    check_shape();
    require(data_.size() == numel_from_shape(), "Tensor: data size ", data_.size(),
            " does not match shape product ", numel_from_shape());
  }

  /// Scalar tensor (spatial rank 0, one channel).
  static Tensor scalar(double v) { return Tensor({1}, 0, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  int spatial_rank() const { return spatial_rank_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t channels() const { return shape_.back(); }
  std::size_t extent(std::size_t axis) const { return shape_[axis]; }
  std::size_t numel() const { return data_.size(); }

  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  const std::vector<double>& values() const { return data_; }
  std::vector<double>& values() { return data_; }

  bool same_shape(const Tensor& o) const {
    return spatial_rank_ == o.spatial_rank_ && shape_ == o.shape_;
  }

  double as_scalar() const {
    require(numel() == 1, "as_scalar: tensor has ", numel(), " elements");
    return data_[0];
  }

  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size());
    std::size_t acc = 1;
    for (std::size_t d = shape_.size(); d-- > 0;) {
      s[d] = acc;
      acc *= shape_[d];
    }
    return s;
  }

  /// Number of leading "rows" when the trailing `tail` axes are treated as
  /// the working unit (e.g. tail=1 for per-channel-vector ops).
  std::size_t rows_before(std::size_t tail) const {
    std::size_t r = 1;
    for (std::size_t d = 0; d + tail < shape_.size(); ++d) r *= shape_[d];
    return r;
  }

  std::size_t tail_size(std::size_t tail) const {
    std::size_t r = 1;
    for (std::size_t d = shape_.size() - tail; d < shape_.size(); ++d) r *= shape_[d];
    return r;
  }

 private:
  std::size_t numel_from_shape() const {
    std::size_t n = 1;
    for (auto e : shape_) n *= e;
    return n;
  }

  void check_shape() const {
    require(spatial_rank_ >= 0, "Tensor: spatial rank must be >= 0");
    require(shape_.size() == static_cast<std::size_t>(spatial_rank_) + 1,
            "Tensor: shape length ", shape_.size(), " != spatial rank ", spatial_rank_, " + 1");
    for (auto e : shape_) require(e >= 1, "Tensor: axis lengths must be >= 1");
  }

  std::vector<std::size_t> shape_;
  int spatial_rank_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// XNNT binary format: "XNNT", u32 version, u32 spatial rank, u32 total rank,
// rank x u64 axis lengths, numel x f64 values, all little-endian row-major.
// ---------------------------------------------------------------------------

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  write_u64(os, v);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  require(bool(is), "read_u32: unexpected end of stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  require(bool(is), "read_u64: unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  std::uint64_t v = read_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline void write_magic(std::ostream& os, const char m[4]) { os.write(m, 4); }

inline void check_magic(std::istream& is, const char expect[4], const char* what) {
  char m[4];
  is.read(m, 4);
  require(bool(is) && std::memcmp(m, expect, 4) == 0, what, ": bad magic");
}

}  // namespace io

inline void write_xnnt(std::ostream& os, const Tensor& t) {
  io::write_magic(os, "XNNT");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(t.spatial_rank()));
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::write_u64(os, e);
  for (std::size_t i = 0; i < t.numel(); ++i) io::write_f64(os, t[i]);
}

inline Tensor read_xnnt(std::istream& is) {
  io::check_magic(is, "XNNT", "XNNT");
  const std::uint32_t version = io::read_u32(is);
  require(version == 1, "XNNT: unsupported version ", version);
  const std::uint32_t spatial = io::read_u32(is);
  const std::uint32_t rank = io::read_u32(is);
  require(rank == spatial + 1, "XNNT: rank ", rank, " inconsistent with spatial rank ", spatial);
  std::vector<std::size_t> shape(rank);
  std::size_t numel = 1;
  for (auto& e : shape) {
    e = static_cast<std::size_t>(io::read_u64(is));
    require(e >= 1, "XNNT: axis length must be >= 1");
    numel *= e;
  }
  std::vector<double> data(numel);
  for (auto& d : data) d = io::read_f64(is);
  return Tensor(std::move(shape), static_cast<int>(spatial), std::move(data));
}

inline void save_xnnt(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "save_xnnt: cannot open ", path);
  write_xnnt(os, t);
  require(bool(os), "save_xnnt: write failed for ", path);
}

inline Tensor load_xnnt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "load_xnnt: cannot open ", path);
  return read_xnnt(is);
}

}  // namespace xnn
