#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "xnn/axis_perm.hpp"
#include "xnn/common.hpp"
#include "xnn/tensor.hpp"

namespace xnn {

// ---------------------------------------------------------------------------
// Small row-major matmul helpers.  The contiguous inner loop over the second
// operand's columns is what the compiler vectorizes; keep that shape.
// ---------------------------------------------------------------------------
namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[m,n] += A^T B with A[k,m], B[k,n]
inline void mm_at_b(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                    std::size_t n) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* ak = a + kk * m;
    const double* bk = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ak[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[m,n] += A B^T with A[m,k], B[n,k]
inline void mm_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] += acc;
    }
  }
}

}  // namespace detail

inline bool all_finite(const Tensor& t) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "add: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b[i];
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "sub: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b[i];
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "mul: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b[i];
  return y;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= s;
  return y;
}

/// Elementwise maximum; on ties the first argument wins (gradients route to
/// the first operand when a == b).
inline Tensor max_merge(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_merge: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] >= b[i] ? a[i] : b[i];
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
  return y;
}

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = sigmoid_scalar(y[i]);
  return y;
}

inline double gelu_scalar(double z) { return 0.5 * z * (1.0 + std::erf(z * 0.7071067811865475244)); }

inline Tensor gelu(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = gelu_scalar(y[i]);
  return y;
}

inline double gelu_grad_scalar(double z) {
  const double inv_sqrt2 = 0.7071067811865475244;
  const double phi = std::exp(-0.5 * z * z) * 0.39894228040143267794;  // pdf of N(0,1)
  return 0.5 * (1.0 + std::erf(z * inv_sqrt2)) + z * phi;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  return Tensor::scalar(acc);
}

inline Tensor mean_all(const Tensor& x) {
  return Tensor::scalar(sum_all(x).as_scalar() / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Adaptive pooling: each pooled axis a is split into targets[a] contiguous
// bins with boundaries floor(i*n/t) .. floor((i+1)*n/t).
//
// Averages are taken over the box values sorted ascending, so the result is
// a function of the value multiset only; pooling therefore commutes exactly
// with any permutation of the pooled axes.
// ---------------------------------------------------------------------------

enum class PoolMode { max, avg };

namespace detail {

inline std::vector<std::size_t> pool_bin_of_index(std::size_t n, std::size_t t) {
  std::vector<std::size_t> bin(n);
  for (std::size_t j = 0; j < t; ++j) {
    const std::size_t lo = j * n / t;
    const std::size_t hi = (j + 1) * n / t;
    for (std::size_t i = lo; i < hi; ++i) bin[i] = j;
  }
  return bin;
}

}  // namespace detail

inline Tensor adaptive_pool(const Tensor& x, const std::vector<int>& axes,
                            const std::vector<std::size_t>& targets, PoolMode mode) {
  require(axes.size() == targets.size(), "adaptive_pool: axes/targets size mismatch");
  const int k = x.spatial_rank();
  std::vector<std::size_t> out_shape = x.shape();
  std::vector<char> pooled(x.rank(), 0);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    const int a = axes[i];
    require(a >= 0 && a < k, "adaptive_pool: axis ", a, " is not a spatial axis");
    require(!pooled[static_cast<std::size_t>(a)], "adaptive_pool: duplicate axis ", a);
    require(targets[i] >= 1, "adaptive_pool: target must be >= 1");
    require(targets[i] <= x.extent(static_cast<std::size_t>(a)), "adaptive_pool: target ",
            targets[i], " exceeds axis length ", x.extent(static_cast<std::size_t>(a)));
    pooled[static_cast<std::size_t>(a)] = 1;
    out_shape[static_cast<std::size_t>(a)] = targets[i];
  }

  // Per-axis map from input index to output index (identity on unpooled axes).
  std::vector<std::vector<std::size_t>> bin(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (pooled[d]) {
      bin[d] = detail::pool_bin_of_index(x.extent(d), out_shape[d]);
    } else {
      bin[d].resize(x.extent(d));
      for (std::size_t i = 0; i < x.extent(d); ++i) bin[d][i] = i;
    }
  }

  Tensor y(out_shape, k);
  const auto out_strides = y.strides();
  const std::size_t rank = x.rank();

  if (mode == PoolMode::max) {
    std::vector<char> seen(y.numel(), 0);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += bin[d][idx[d]] * out_strides[d];
      if (!seen[off] || x[i] > y[off]) {
        y[off] = x[i];
        seen[off] = 1;
      }
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.extent(d)) break;
        idx[d] = 0;
      }
    }
    return y;
  }

  // avg: gather box members per output cell, then sorted summation.
  std::vector<std::vector<double>> boxes(y.numel());
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += bin[d][idx[d]] * out_strides[d];
      boxes[off].push_back(x[i]);
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.extent(d)) break;
        idx[d] = 0;
      }
    }
  }
  for (std::size_t off = 0; off < y.numel(); ++off) {
    auto& box = boxes[off];
    std::sort(box.begin(), box.end());
    double acc = 0.0;
    for (double v : box) acc += v;
    y[off] = acc / static_cast<double>(box.size());
  }
  return y;
}

/// Pool every spatial axis to length 1.
inline Tensor global_pool(const Tensor& x, PoolMode mode) {
  std::vector<int> axes;
  std::vector<std::size_t> targets;
  for (int a = 0; a < x.spatial_rank(); ++a) {
    axes.push_back(a);
    targets.push_back(1);
  }
  if (axes.empty()) return x;
  return adaptive_pool(x, axes, targets, mode);
}

/// Backward of adaptive_pool.  avg distributes dy/box_size; max routes each
/// cell's gradient to the first (row-major) element attaining the maximum.
inline Tensor adaptive_pool_backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                                     const std::vector<int>& axes,
                                     const std::vector<std::size_t>& targets, PoolMode mode) {
  std::vector<char> pooled(x.rank(), 0);
  for (std::size_t i = 0; i < axes.size(); ++i) pooled[static_cast<std::size_t>(axes[i])] = 1;
  (void)targets;
  std::vector<std::vector<std::size_t>> bin(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (pooled[d]) {
      bin[d] = detail::pool_bin_of_index(x.extent(d), y.extent(d));
    } else {
      bin[d].resize(x.extent(d));
      for (std::size_t i = 0; i < x.extent(d); ++i) bin[d][i] = i;
    }
  }
  const auto out_strides = y.strides();
  const std::size_t rank = x.rank();
  Tensor dx(x.shape(), x.spatial_rank());

  if (mode == PoolMode::max) {
    std::vector<char> routed(y.numel(), 0);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += bin[d][idx[d]] * out_strides[d];
      if (!routed[off] && x[i] == y[off]) {
        dx[i] += dy[off];
        routed[off] = 1;
      }
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.extent(d)) break;
        idx[d] = 0;
      }
    }
    return dx;
  }

  std::vector<std::size_t> box_size(y.numel(), 0);
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += bin[d][idx[d]] * out_strides[d];
      box_size[off]++;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.extent(d)) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += bin[d][idx[d]] * out_strides[d];
    dx[i] += dy[off] / static_cast<double>(box_size[off]);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < x.extent(d)) break;
      idx[d] = 0;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsample along one axis: each element repeated `factor`
// times contiguously.
// ---------------------------------------------------------------------------

inline Tensor resize_repeat(const Tensor& x, int axis, int factor) {
  require(factor >= 1, "resize_repeat: factor must be >= 1");
  require(axis >= 0 && axis < x.spatial_rank(), "resize_repeat: axis out of range");
  if (factor == 1) return x;
  std::vector<std::size_t> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] *= static_cast<std::size_t>(factor);
  Tensor y(out_shape, x.spatial_rank());

  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.extent(static_cast<std::size_t>(d));
  const std::size_t n = x.extent(static_cast<std::size_t>(axis));
  std::size_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.rank(); ++d) inner *= x.extent(d);

  const double* src = x.data();
  double* dst = y.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (int r = 0; r < factor; ++r)
        std::copy_n(src + (o * n + i) * inner, inner,
                    dst + ((o * n + i) * static_cast<std::size_t>(factor) +
                           static_cast<std::size_t>(r)) * inner);
  return y;
}

inline Tensor resize_repeat_backward(const Tensor& x, const Tensor& dy, int axis, int factor) {
  if (factor == 1) return dy;
  Tensor dx(x.shape(), x.spatial_rank());
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.extent(static_cast<std::size_t>(d));
  const std::size_t n = x.extent(static_cast<std::size_t>(axis));
  std::size_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.rank(); ++d) inner *= x.extent(d);
  const double* src = dy.data();
  double* dst = dx.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (int r = 0; r < factor; ++r) {
        const double* s = src + ((o * n + i) * static_cast<std::size_t>(factor) +
                                 static_cast<std::size_t>(r)) * inner;
        double* d2 = dst + (o * n + i) * inner;
        for (std::size_t j = 0; j < inner; ++j) d2[j] += s[j];
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Reshape / pad / slice
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape, int spatial_rank) {
  return Tensor(std::move(shape), spatial_rank, x.values());
}

inline Tensor zero_pad_axis(const Tensor& x, int axis, std::size_t lo, std::size_t hi) {
  require(axis >= 0 && axis < x.spatial_rank(), "zero_pad_axis: axis out of range");
  std::vector<std::size_t> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] += lo + hi;
  Tensor y(out_shape, x.spatial_rank());
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.extent(static_cast<std::size_t>(d));
  const std::size_t n = x.extent(static_cast<std::size_t>(axis));
  std::size_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.rank(); ++d) inner *= x.extent(d);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.data() + (o * n + i) * inner, inner,
                  y.data() + (o * (n + lo + hi) + lo + i) * inner);
  return y;
}

inline Tensor slice_axis(const Tensor& x, int axis, std::size_t start, std::size_t len) {
  require(axis >= 0 && axis < x.spatial_rank(), "slice_axis: axis out of range");
  require(start + len <= x.extent(static_cast<std::size_t>(axis)), "slice_axis: out of range");
  std::vector<std::size_t> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor y(out_shape, x.spatial_rank());
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.extent(static_cast<std::size_t>(d));
  const std::size_t n = x.extent(static_cast<std::size_t>(axis));
  std::size_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.rank(); ++d) inner *= x.extent(d);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < len; ++i)
      std::copy_n(x.data() + (o * n + start + i) * inner, inner, y.data() + (o * len + i) * inner);
  return y;
}

// ---------------------------------------------------------------------------
// Convolution over the trailing spatial axes (cross-correlation).  All other
// spatial axes are batch.  Weight layout: [k^arity taps row-major, Cin, Cout];
// 'same' padding is symmetric with the extra element on the high side.
// ---------------------------------------------------------------------------

enum class Padding { valid, same };

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  Padding padding = Padding::valid;
  int in_channels = 1;
  int out_channels = 1;
  int spatial_arity = 1;  // trailing spatial axes spanned by the kernel (1 or 2)
};

namespace detail {

struct ConvAxis {
  std::size_t in_len = 1, out_len = 1;
  long pad_lo = 0;
};

inline ConvAxis conv_axis_geometry(std::size_t n, int kernel, int stride, Padding padding) {
  ConvAxis g;
  g.in_len = n;
  if (padding == Padding::valid) {
    require(n >= static_cast<std::size_t>(kernel), "conv: axis length ", n,
            " shorter than kernel ", kernel, " under valid padding");
    g.out_len = (n - static_cast<std::size_t>(kernel)) / static_cast<std::size_t>(stride) + 1;
    g.pad_lo = 0;
  } else {
    g.out_len = (n + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
    const long pad_total =
        std::max<long>(0, static_cast<long>((g.out_len - 1) * static_cast<std::size_t>(stride)) +
                              kernel - static_cast<long>(n));
    g.pad_lo = pad_total / 2;  // extra padding goes on the high side
  }
  require(g.out_len >= 1, "conv: output length must be >= 1");
  return g;
}

// Valid output index range [lo, hi) of one axis for a fixed kernel tap:
// positions o with 0 <= o*stride - pad + t < n.
struct TapRange {
  std::size_t lo = 0, hi = 0;
};

inline TapRange tap_range(const ConvAxis& g, int stride, long t) {
  const long shift = t - g.pad_lo;
  long lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  long hi_in = static_cast<long>(g.in_len) - 1 - shift;
  long hi = hi_in < 0 ? -1 : hi_in / stride;
  hi = std::min(hi, static_cast<long>(g.out_len) - 1);
  TapRange r;
  if (hi >= lo) {
    r.lo = static_cast<std::size_t>(lo);
    r.hi = static_cast<std::size_t>(hi) + 1;
  }
  return r;
}

// Generic conv over the trailing `arity` spatial axes; arity in 1..3.
// Tap-major accumulation: each kernel tap contributes a branch-free pass over
// its valid output rectangle, so every output element still sees taps in
// ascending order (bit-stable across batch layouts).
inline Tensor conv_trailing(const Tensor& x, const Tensor& w, const Tensor& b, int kernel,
                            int stride, Padding padding, int arity) {
  const int k = x.spatial_rank();
  require(arity >= 1 && arity <= 3, "conv: arity must be in 1..3");
  require(k >= arity, "conv: tensor has ", k, " spatial axes, kernel needs ", arity);
  require(kernel >= 1 && stride >= 1, "conv: kernel and stride must be positive");
  const std::size_t cin = x.channels();
  std::size_t taps = 1;
  for (int d = 0; d < arity; ++d) taps *= static_cast<std::size_t>(kernel);
  require(w.rank() >= 2 && w.numel() % (cin) == 0, "conv: bad weight tensor");
  const std::size_t cout = w.channels();
  require(w.numel() == taps * cin * cout, "conv: weight has ", w.numel(), " values, expected ",
          taps * cin * cout);
  require(b.numel() == cout, "conv: bias has ", b.numel(), " values, expected ", cout);

  ConvAxis geo[3];
  for (int d = 0; d < arity; ++d)
    geo[d] = conv_axis_geometry(x.extent(static_cast<std::size_t>(k - arity + d)), kernel, stride,
                                padding);

  std::vector<std::size_t> out_shape = x.shape();
  for (int d = 0; d < arity; ++d) out_shape[static_cast<std::size_t>(k - arity + d)] = geo[d].out_len;
  out_shape.back() = cout;
  Tensor y(out_shape, k);

  std::size_t rows = 1;
  for (int d = 0; d < k - arity; ++d) rows *= x.extent(static_cast<std::size_t>(d));
  std::size_t in_block = cin, out_block = cout;
  for (int d = 0; d < arity; ++d) {
    in_block *= geo[d].in_len;
    out_block *= geo[d].out_len;
  }
  std::size_t in_stride[3] = {1, 1, 1}, out_stride[3] = {1, 1, 1};
  for (int d = arity - 1; d >= 0; --d) {
    in_stride[d] = (d == arity - 1) ? cin : in_stride[d + 1] * geo[d + 1].in_len;
    out_stride[d] = (d == arity - 1) ? cout : out_stride[d + 1] * geo[d + 1].out_len;
  }

  const double* wd = w.data();
  const double* bd = b.data();
  const std::size_t su = static_cast<std::size_t>(stride);

  for (std::size_t r = 0; r < rows; ++r) {
    const double* xin = x.data() + r * in_block;
    double* yout = y.data() + r * out_block;
    // bias fill
    for (std::size_t cell = 0; cell < out_block; cell += cout)
      for (std::size_t c = 0; c < cout; ++c) yout[cell + c] = bd[c];
    // one pass per tap over its valid rectangle
    std::size_t tap_idx[3] = {0, 0, 0};
    for (std::size_t t = 0; t < taps; ++t) {
      TapRange range[3];
      bool nonempty = true;
      long base_shift[3];
      for (int d = 0; d < arity; ++d) {
        range[d] = tap_range(geo[d], stride, static_cast<long>(tap_idx[d]));
        base_shift[d] = static_cast<long>(tap_idx[d]) - geo[d].pad_lo;
        if (range[d].lo >= range[d].hi) nonempty = false;
      }
      if (nonempty) {
        const double* wt = wd + t * cin * cout;
        const std::size_t o0_lo = arity >= 2 ? range[0].lo : 0;
        const std::size_t o0_hi = arity >= 2 ? range[0].hi : 1;
        const std::size_t o1_lo = arity >= 3 ? range[1].lo : (arity == 2 ? range[1].lo : 0);
        // For clarity treat dims generically below via explicit nesting.
        (void)o1_lo;
        if (arity == 1) {
          for (std::size_t o = range[0].lo; o < range[0].hi; ++o) {
            const double* xi = xin + (static_cast<long>(o * su) + base_shift[0]) * in_stride[0];
            double* yo = yout + o * out_stride[0];
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = xi[ci];
              const double* wrow = wt + ci * cout;
              for (std::size_t c = 0; c < cout; ++c) yo[c] += xv * wrow[c];
            }
          }
        } else if (arity == 2) {
          for (std::size_t o0 = o0_lo; o0 < o0_hi; ++o0) {
            const double* x0 = xin + (static_cast<long>(o0 * su) + base_shift[0]) * in_stride[0];
            double* y0 = yout + o0 * out_stride[0];
            for (std::size_t o1 = range[1].lo; o1 < range[1].hi; ++o1) {
              const double* xi = x0 + (static_cast<long>(o1 * su) + base_shift[1]) * in_stride[1];
              double* yo = y0 + o1 * out_stride[1];
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const double xv = xi[ci];
                const double* wrow = wt + ci * cout;
                for (std::size_t c = 0; c < cout; ++c) yo[c] += xv * wrow[c];
              }
            }
          }
        } else {
          for (std::size_t o0 = range[0].lo; o0 < range[0].hi; ++o0) {
            const double* x0 = xin + (static_cast<long>(o0 * su) + base_shift[0]) * in_stride[0];
            double* y0 = yout + o0 * out_stride[0];
            for (std::size_t o1 = range[1].lo; o1 < range[1].hi; ++o1) {
              const double* x1 = x0 + (static_cast<long>(o1 * su) + base_shift[1]) * in_stride[1];
              double* y1 = y0 + o1 * out_stride[1];
              for (std::size_t o2 = range[2].lo; o2 < range[2].hi; ++o2) {
                const double* xi = x1 + (static_cast<long>(o2 * su) + base_shift[2]) * in_stride[2];
                double* yo = y1 + o2 * out_stride[2];
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double xv = xi[ci];
                  const double* wrow = wt + ci * cout;
                  for (std::size_t c = 0; c < cout; ++c) yo[c] += xv * wrow[c];
                }
              }
            }
          }
        }
      }
      for (int d = arity; d-- > 0;) {
        if (++tap_idx[d] < static_cast<std::size_t>(kernel)) break;
        tap_idx[d] = 0;
      }
    }
  }
  return y;
}

inline void conv_trailing_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int kernel,
                                   int stride, Padding padding, int arity, Tensor* dx, Tensor* dw,
                                   Tensor* db) {
  const int k = x.spatial_rank();
  const std::size_t cin = x.channels();
  const std::size_t cout = w.channels();
  std::size_t taps = 1;
  for (int d = 0; d < arity; ++d) taps *= static_cast<std::size_t>(kernel);

  ConvAxis geo[3];
  for (int d = 0; d < arity; ++d)
    geo[d] = conv_axis_geometry(x.extent(static_cast<std::size_t>(k - arity + d)), kernel, stride,
                                padding);

  std::size_t rows = 1;
  for (int d = 0; d < k - arity; ++d) rows *= x.extent(static_cast<std::size_t>(d));
  std::size_t in_block = cin, out_block = cout;
  for (int d = 0; d < arity; ++d) {
    in_block *= geo[d].in_len;
    out_block *= geo[d].out_len;
  }
  std::size_t in_stride[3] = {1, 1, 1}, out_stride[3] = {1, 1, 1};
  for (int d = arity - 1; d >= 0; --d) {
    in_stride[d] = (d == arity - 1) ? cin : in_stride[d + 1] * geo[d + 1].in_len;
    out_stride[d] = (d == arity - 1) ? cout : out_stride[d + 1] * geo[d + 1].out_len;
  }

  const double* wd = w.data();
  const std::size_t su = static_cast<std::size_t>(stride);

  for (std::size_t r = 0; r < rows; ++r) {
    const double* xin = x.data() + r * in_block;
    const double* dyr = dy.data() + r * out_block;
    double* dxr = dx ? dx->data() + r * in_block : nullptr;
    if (db) {
      double* dbd = db->data();
      for (std::size_t cell = 0; cell < out_block; cell += cout)
        for (std::size_t c = 0; c < cout; ++c) dbd[c] += dyr[cell + c];
    }
    std::size_t tap_idx[3] = {0, 0, 0};
    for (std::size_t t = 0; t < taps; ++t) {
      TapRange range[3];
      bool nonempty = true;
      long base_shift[3];
      for (int d = 0; d < arity; ++d) {
        range[d] = tap_range(geo[d], stride, static_cast<long>(tap_idx[d]));
        base_shift[d] = static_cast<long>(tap_idx[d]) - geo[d].pad_lo;
        if (range[d].lo >= range[d].hi) nonempty = false;
      }
      if (nonempty) {
        const double* wt = wd + t * cin * cout;
        double* dwt = dw ? dw->data() + t * cin * cout : nullptr;
        auto cell_update = [&](const double* g, long in_off) {
          const double* xi = xin + in_off;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* wrow = wt + ci * cout;
            if (dxr) {
              double acc = 0.0;
              for (std::size_t c = 0; c < cout; ++c) acc += g[c] * wrow[c];
              dxr[in_off + static_cast<long>(ci)] += acc;
            }
            if (dwt) {
              const double xv = xi[ci];
              double* dwrow = dwt + ci * cout;
              for (std::size_t c = 0; c < cout; ++c) dwrow[c] += xv * g[c];
            }
          }
        };
        if (arity == 1) {
          for (std::size_t o = range[0].lo; o < range[0].hi; ++o)
            cell_update(dyr + o * out_stride[0],
                        (static_cast<long>(o * su) + base_shift[0]) *
                            static_cast<long>(in_stride[0]));
        } else if (arity == 2) {
          for (std::size_t o0 = range[0].lo; o0 < range[0].hi; ++o0)
            for (std::size_t o1 = range[1].lo; o1 < range[1].hi; ++o1)
              cell_update(dyr + o0 * out_stride[0] + o1 * out_stride[1],
                          (static_cast<long>(o0 * su) + base_shift[0]) *
                                  static_cast<long>(in_stride[0]) +
                              (static_cast<long>(o1 * su) + base_shift[1]) *
                                  static_cast<long>(in_stride[1]));
        } else {
          for (std::size_t o0 = range[0].lo; o0 < range[0].hi; ++o0)
            for (std::size_t o1 = range[1].lo; o1 < range[1].hi; ++o1)
              for (std::size_t o2 = range[2].lo; o2 < range[2].hi; ++o2)
                cell_update(dyr + o0 * out_stride[0] + o1 * out_stride[1] + o2 * out_stride[2],
                            (static_cast<long>(o0 * su) + base_shift[0]) *
                                    static_cast<long>(in_stride[0]) +
                                (static_cast<long>(o1 * su) + base_shift[1]) *
                                    static_cast<long>(in_stride[1]) +
                                (static_cast<long>(o2 * su) + base_shift[2]) *
                                    static_cast<long>(in_stride[2]));
        }
      }
      for (int d = arity; d-- > 0;) {
        if (++tap_idx[d] < static_cast<std::size_t>(kernel)) break;
        tap_idx[d] = 0;
      }
    }
  }
}

}  // namespace detail

inline Tensor conv_lastaxes(const Tensor& x, const Tensor& w, const Tensor& b,
                            const ConvSpec& spec) {
  require(spec.spatial_arity == 1 || spec.spatial_arity == 2,
          "conv_lastaxes: spatial arity must be 1 or 2");
  require(x.channels() == static_cast<std::size_t>(spec.in_channels),
          "conv_lastaxes: input has ", x.channels(), " channels, spec expects ", spec.in_channels);
  require(w.channels() == static_cast<std::size_t>(spec.out_channels),
          "conv_lastaxes: weight out channels mismatch");
  return detail::conv_trailing(x, w, b, spec.kernel, spec.stride, spec.padding,
                               spec.spatial_arity);
}

/// Expected weight shape for conv_lastaxes: [kernel]^arity x Cin x Cout.
inline std::vector<std::size_t> conv_weight_shape(const ConvSpec& spec) {
  std::vector<std::size_t> s;
  for (int d = 0; d < spec.spatial_arity; ++d) s.push_back(static_cast<std::size_t>(spec.kernel));
  s.push_back(static_cast<std::size_t>(spec.in_channels));
  s.push_back(static_cast<std::size_t>(spec.out_channels));
  return s;
}

inline std::size_t conv_out_len(std::size_t n, const ConvSpec& spec) {
  return detail::conv_axis_geometry(n, spec.kernel, spec.stride, spec.padding).out_len;
}

// ---------------------------------------------------------------------------
// Linear along the last spatial axis with the channel axis folded into the
// feature dimension: input rows of length n*Cin map through w [n*Cin, m*Cout].
// ---------------------------------------------------------------------------

inline Tensor linear_lastaxis(const Tensor& x, const Tensor& w, const Tensor& b,
                              std::size_t out_spatial, std::size_t out_channels) {
  require(x.spatial_rank() >= 1, "linear_lastaxis: need at least one spatial axis");
  const std::size_t n_in = x.extent(x.rank() - 2) * x.channels();
  const std::size_t n_out = out_spatial * out_channels;
  require(w.rank() == 2 && w.extent(0) == n_in && w.extent(1) == n_out,
          "linear_lastaxis: weight must be [", n_in, " x ", n_out, "]");
  require(b.numel() == n_out, "linear_lastaxis: bias size mismatch");

  std::vector<std::size_t> out_shape = x.shape();
  out_shape[x.rank() - 2] = out_spatial;
  out_shape.back() = out_channels;
  Tensor y(out_shape, x.spatial_rank());

  const std::size_t rows = x.rows_before(2);
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y.data() + r * n_out;
    std::copy_n(b.data(), n_out, yr);
    detail::mm_acc(x.data() + r * n_in, w.data(), yr, 1, n_in, n_out);
  }
  return y;
}

inline void linear_lastaxis_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                                     Tensor* dx, Tensor* dw, Tensor* db) {
  const std::size_t n_in = w.extent(0);
  const std::size_t n_out = w.extent(1);
  const std::size_t rows = x.rows_before(2);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = dy.data() + r * n_out;
    if (db) {
      double* dbd = db->data();
      for (std::size_t j = 0; j < n_out; ++j) dbd[j] += g[j];
    }
    if (dx) detail::mm_a_bt(g, w.data(), dx->data() + r * n_in, 1, n_out, n_in);
    if (dw) detail::mm_at_b(x.data() + r * n_in, g, dw->data(), 1, n_in, n_out);
  }
}

/// Per-position channel map: y[..., j] = sum_i x[..., i] w[i, j] + b[j].
inline Tensor dense_channels(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t cin = x.channels();
  require(w.rank() == 2 && w.extent(0) == cin, "dense_channels: weight rows must equal channels");
  const std::size_t cout = w.extent(1);
  require(b.numel() == cout, "dense_channels: bias size mismatch");
  std::vector<std::size_t> out_shape = x.shape();
  out_shape.back() = cout;
  Tensor y(out_shape, x.spatial_rank());
  const std::size_t rows = x.rows_before(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y.data() + r * cout;
    std::copy_n(b.data(), cout, yr);
  }
  detail::mm_acc(x.data(), w.data(), y.data(), rows, cin, cout);
  return y;
}

inline void dense_channels_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx,
                                    Tensor* dw, Tensor* db) {
  const std::size_t cin = w.extent(0);
  const std::size_t cout = w.extent(1);
  const std::size_t rows = x.rows_before(1);
  if (db) {
    double* dbd = db->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = dy.data() + r * cout;
      for (std::size_t j = 0; j < cout; ++j) dbd[j] += g[j];
    }
  }
  if (dx) detail::mm_a_bt(dy.data(), w.data(), dx->data(), rows, cout, cin);
  if (dw) detail::mm_at_b(x.data(), dy.data(), dw->data(), rows, cin, cout);
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel axis, per spatial position.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t c = x.channels();
  require(gamma.numel() == c && beta.numel() == c, "layer_norm: gamma/beta must have ", c,
          " entries");
  Tensor y(x.shape(), x.spatial_rank());
  const std::size_t rows = x.rows_before(1);
  const double* g = gamma.data();
  const double* bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double* yr = y.data() + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < c; ++i) yr[i] = (xr[i] - mean) * rstd * g[i] + bt[i];
  }
  return y;
}

inline void layer_norm_channels_backward(const Tensor& x, const Tensor& gamma, const Tensor& dy,
                                         Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const std::size_t c = x.channels();
  const std::size_t rows = x.rows_before(1);
  const double* g = gamma.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    const double* gy = dy.data() + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);

    double sum_gh = 0.0, sum_ghx = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double xhat = (xr[i] - mean) * rstd;
      const double gh = gy[i] * g[i];
      sum_gh += gh;
      sum_ghx += gh * xhat;
      if (dgamma) (*dgamma)[i] += gy[i] * xhat;
      if (dbeta) (*dbeta)[i] += gy[i];
    }
    if (dx) {
      double* dxr = dx->data() + r * c;
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < c; ++i) {
        const double xhat = (xr[i] - mean) * rstd;
        dxr[i] += rstd * (gy[i] * g[i] - inv_c * sum_gh - xhat * inv_c * sum_ghx);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention with the last spatial axis as sequence, channels
// as embedding, all other spatial axes as batch.  Projections are bias-free.
// ---------------------------------------------------------------------------

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // each [C, C]
  int heads = 1;
};

struct AttentionDetail {
  Tensor y;
  Tensor q, k, v, o;          // projections / pre-output, shaped like x
  std::vector<double> probs;  // rows x heads x L x L softmax weights
};

namespace detail {
/// Tally of score-matrix multiply-accumulates (q.k and p.v contractions),
/// used by the complexity benchmark.
inline std::uint64_t& attn_score_macs() {
  thread_local std::uint64_t count = 0;
  return count;
}
}  // namespace detail

inline AttentionDetail self_attention_detail(const Tensor& x, const AttentionParams& p) {
  const std::size_t c = x.channels();
  require(p.wq.rank() == 2 && p.wq.extent(0) == c && p.wq.extent(1) == c &&
              p.wk.extent(0) == c && p.wk.extent(1) == c && p.wv.extent(0) == c &&
              p.wv.extent(1) == c && p.wo.extent(0) == c && p.wo.extent(1) == c,
          "self_attention: projection weights must be [C x C]");
  require(p.heads >= 1 && c % static_cast<std::size_t>(p.heads) == 0,
          "self_attention: channel count ", c, " not divisible by ", p.heads, " heads");
  require(x.spatial_rank() >= 1, "self_attention: need a sequence axis");

  const std::size_t L = x.extent(x.rank() - 2);
  const std::size_t heads = static_cast<std::size_t>(p.heads);
  const std::size_t dh = c / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t rows = x.rows_before(2);
  const std::size_t block = L * c;

  AttentionDetail det;
  det.q = Tensor(x.shape(), x.spatial_rank());
  det.k = Tensor(x.shape(), x.spatial_rank());
  det.v = Tensor(x.shape(), x.spatial_rank());
  det.o = Tensor(x.shape(), x.spatial_rank());
  det.y = Tensor(x.shape(), x.spatial_rank());
  det.probs.assign(rows * heads * L * L, 0.0);

  std::vector<double> s(L * L);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * block;
    double* q = det.q.data() + r * block;
    double* k = det.k.data() + r * block;
    double* v = det.v.data() + r * block;
    double* o = det.o.data() + r * block;
    detail::mm_acc(xr, p.wq.data(), q, L, c, c);
    detail::mm_acc(xr, p.wk.data(), k, L, c, c);
    detail::mm_acc(xr, p.wv.data(), v, L, c, c);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t hoff = h * dh;
      // scores
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = q + i * c + hoff;
        for (std::size_t j = 0; j < L; ++j) {
          const double* kj = k + j * c + hoff;
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          s[i * L + j] = acc * scl;
        }
      }
      detail::attn_score_macs() += L * L * dh;
      // rowwise softmax
      double* prow = det.probs.data() + (r * heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        double mx = s[i * L];
        for (std::size_t j = 1; j < L; ++j) mx = std::max(mx, s[i * L + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          const double e = std::exp(s[i * L + j] - mx);
          prow[i * L + j] = e;
          z += e;
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < L; ++j) prow[i * L + j] *= inv;
      }
      // apply to values
      for (std::size_t i = 0; i < L; ++i) {
        double* oi = o + i * c + hoff;
        for (std::size_t j = 0; j < L; ++j) {
          const double pv = prow[i * L + j];
          const double* vj = v + j * c + hoff;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += pv * vj[d];
        }
      }
      detail::attn_score_macs() += L * L * dh;
    }
    detail::mm_acc(o, p.wo.data(), det.y.data() + r * block, L, c, c);
  }
  return det;
}

inline Tensor self_attention_lastaxis(const Tensor& x, const AttentionParams& p) {
  return self_attention_detail(x, p).y;
}

struct AttentionGrads {
  Tensor dx, dwq, dwk, dwv, dwo;
};

inline AttentionGrads self_attention_backward(const Tensor& x, const AttentionParams& p,
                                              const AttentionDetail& det, const Tensor& dy) {
  const std::size_t c = x.channels();
  const std::size_t L = x.extent(x.rank() - 2);
  const std::size_t heads = static_cast<std::size_t>(p.heads);
  const std::size_t dh = c / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t rows = x.rows_before(2);
  const std::size_t block = L * c;

  AttentionGrads g;
  g.dx = Tensor(x.shape(), x.spatial_rank());
  g.dwq = Tensor(p.wq.shape(), p.wq.spatial_rank());
  g.dwk = Tensor(p.wk.shape(), p.wk.spatial_rank());
  g.dwv = Tensor(p.wv.shape(), p.wv.spatial_rank());
  g.dwo = Tensor(p.wo.shape(), p.wo.spatial_rank());

  std::vector<double> dov(block), dq(block), dk(block), dv(block), dp(L * L), ds(L * L);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * block;
    const double* q = det.q.data() + r * block;
    const double* k = det.k.data() + r * block;
    const double* v = det.v.data() + r * block;
    const double* o = det.o.data() + r * block;
    const double* gy = dy.data() + r * block;

    // y = o * wo
    std::fill(dov.begin(), dov.end(), 0.0);
    detail::mm_a_bt(gy, p.wo.data(), dov.data(), L, c, c);
    detail::mm_at_b(o, gy, g.dwo.data(), L, c, c);

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t hoff = h * dh;
      const double* prow = det.probs.data() + (r * heads + h) * L * L;
      // dP = dO V^T ; dV = P^T dO
      for (std::size_t i = 0; i < L; ++i) {
        const double* doi = dov.data() + i * c + hoff;
        for (std::size_t j = 0; j < L; ++j) {
          const double* vj = v + j * c + hoff;
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) acc += doi[d] * vj[d];
          dp[i * L + j] = acc;
        }
      }
      for (std::size_t j = 0; j < L; ++j) {
        double* dvj = dv.data() + j * c + hoff;
        for (std::size_t i = 0; i < L; ++i) {
          const double pv = prow[i * L + j];
          const double* doi = dov.data() + i * c + hoff;
          for (std::size_t d = 0; d < dh; ++d) dvj[d] += pv * doi[d];
        }
      }
      // softmax backward, then undo the score scaling
      for (std::size_t i = 0; i < L; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < L; ++j) dot += dp[i * L + j] * prow[i * L + j];
        for (std::size_t j = 0; j < L; ++j)
          ds[i * L + j] = prow[i * L + j] * (dp[i * L + j] - dot) * scl;
      }
      // dQ = dS K ; dK = dS^T Q
      for (std::size_t i = 0; i < L; ++i) {
        double* dqi = dq.data() + i * c + hoff;
        for (std::size_t j = 0; j < L; ++j) {
          const double sv = ds[i * L + j];
          const double* kj = k + j * c + hoff;
          for (std::size_t d = 0; d < dh; ++d) dqi[d] += sv * kj[d];
        }
      }
      for (std::size_t j = 0; j < L; ++j) {
        double* dkj = dk.data() + j * c + hoff;
        for (std::size_t i = 0; i < L; ++i) {
          const double sv = ds[i * L + j];
          const double* qi = q + i * c + hoff;
          for (std::size_t d = 0; d < dh; ++d) dkj[d] += sv * qi[d];
        }
      }
    }
    double* dxr = g.dx.data() + r * block;
    detail::mm_a_bt(dq.data(), p.wq.data(), dxr, L, c, c);
    detail::mm_a_bt(dk.data(), p.wk.data(), dxr, L, c, c);
    detail::mm_a_bt(dv.data(), p.wv.data(), dxr, L, c, c);
    detail::mm_at_b(xr, dq.data(), g.dwq.data(), L, c, c);
    detail::mm_at_b(xr, dk.data(), g.dwk.data(), L, c, c);
    detail::mm_at_b(xr, dv.data(), g.dwv.data(), L, c, c);
  }
  return g;
}

}  // namespace xnn
