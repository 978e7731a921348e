#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "xnn/common.hpp"
#include "xnn/eig.hpp"
#include "xnn/rng.hpp"
#include "xnn/tensor.hpp"

namespace xnn {

// ---------------------------------------------------------------------------
// Kernels.  Both are stationary products over axes, which is what makes the
// grid covariance a Kronecker product of small per-axis factors.
// ---------------------------------------------------------------------------

struct KernelSpec {
  enum class Kind { rbf, periodic };
  Kind kind = Kind::rbf;
  double length = 0.3;
  double scale = 1.0;
  double period = 0.3;  // periodic only
};

inline double kernel_eval(const KernelSpec& s, const double* x, const double* y, int d) {
  if (s.kind == KernelSpec::Kind::rbf) {
    double dist2 = 0.0;
    for (int a = 0; a < d; ++a) {
      const double diff = x[a] - y[a];
      dist2 += diff * diff;
    }
    return s.scale * s.scale * std::exp(-dist2 / (2.0 * s.length * s.length));
  }
  double e = 0.0;
  for (int a = 0; a < d; ++a) {
    const double sn = std::sin(3.14159265358979323846 * std::abs(x[a] - y[a]) / s.period);
    e += sn * sn;
  }
  return s.scale * s.scale * std::exp(-2.0 * e / (s.length * s.length));
}

/// One-axis factor of the product kernel, without the scale^2 prefactor.
inline double kernel_eval_1d(const KernelSpec& s, double dx) {
  if (s.kind == KernelSpec::Kind::rbf) return std::exp(-dx * dx / (2.0 * s.length * s.length));
  const double sn = std::sin(3.14159265358979323846 * std::abs(dx) / s.period);
  return std::exp(-2.0 * sn * sn / (s.length * s.length));
}

inline KernelSpec sample_kernel_spec(KernelSpec::Kind kind, CounterRng& rng) {
  KernelSpec s;
  s.kind = kind;
  s.length = rng.uniform(0.1, 0.6);
  s.scale = rng.uniform(0.1, 1.0);
  s.period = rng.uniform(0.1, 0.5);
  return s;
}

// ---------------------------------------------------------------------------
// Grids: side points per axis dividing [-2, 2] with endpoints included; the
// default side for dimension d is 2^(7-d), giving the tensor shapes
// (32,32,1), (16,16,16,1), (8,8,8,8,1), (4,4,4,4,4,1).
// ---------------------------------------------------------------------------

inline std::size_t default_grid_side(int d) {
  require(d >= 2 && d <= 5, "grid: dimension must be in 2..5, got ", d);
  return static_cast<std::size_t>(1) << (7 - d);
}

inline std::vector<double> grid_axis(std::size_t side) {
  require(side >= 2, "grid: need at least 2 points per axis");
  std::vector<double> xs(side);
  for (std::size_t i = 0; i < side; ++i)
    xs[i] = -2.0 + 4.0 * static_cast<double>(i) / static_cast<double>(side - 1);
  return xs;
}

/// Row-major list of grid points (n x d), axis 0 slowest, matching the
/// row-major layout of the sample tensors.
inline std::vector<double> make_grid(int d, std::size_t side) {
  const auto xs = grid_axis(side);
  std::size_t n = 1;
  for (int a = 0; a < d; ++a) n *= side;
  std::vector<double> pts(n * static_cast<std::size_t>(d));
  std::vector<std::size_t> idx(static_cast<std::size_t>(d), 0);
  for (std::size_t p = 0; p < n; ++p) {
    for (int a = 0; a < d; ++a) pts[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(a)] = xs[idx[static_cast<std::size_t>(a)]];
    for (int a = d; a-- > 0;) {
      if (++idx[static_cast<std::size_t>(a)] < side) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
  return pts;
}

inline std::vector<double> make_grid(int d) { return make_grid(d, default_grid_side(d)); }

/// Full covariance matrix over a point list (exactly symmetric by mirroring).
inline std::vector<double> covariance(const std::vector<double>& points, int d,
                                      const KernelSpec& spec) {
  const std::size_t n = points.size() / static_cast<std::size_t>(d);
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = kernel_eval(spec, points.data() + i * static_cast<std::size_t>(d),
                                   points.data() + j * static_cast<std::size_t>(d), d);
      k[i * n + j] = v;
      k[j * n + i] = v;
    }
  }
  return k;
}

// ---------------------------------------------------------------------------
// PSD projection by eigenvalue clipping.
// ---------------------------------------------------------------------------

inline constexpr double kEpsClip = 1e-6;

inline std::vector<double> psd_clip(const std::vector<double>& k, std::size_t n,
                                    double eps = kEpsClip) {
  require(k.size() == n * n, "psd_clip: matrix size mismatch");
  double asym = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) asym = std::max(asym, std::abs(k[i * n + j] - k[j * n + i]));
  require(asym <= 1e-10, "psd_clip: input asymmetry ", asym, " exceeds 1e-10");

  EigResult eig = jacobi_eigh(k, n);
  for (auto& v : eig.values) v = std::max(v, eps);
  // V diag(lambda) V^T, then mirrored for exact symmetry.
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t m = 0; m < n; ++m)
        s += eig.vectors[i * n + m] * eig.values[m] * eig.vectors[j * n + m];
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draw from N(0, K) via Cholesky with jitter escalation (1e-10, x10, three
/// attempts).  Throws if every attempt fails.
inline std::vector<double> sample_gp(const std::vector<double>& k_psd, std::size_t n,
                                     CounterRng& rng) {
  std::vector<double> l;
  bool ok = false;
  double jitter = 1e-10;
  std::vector<double> work = k_psd;
  for (int attempt = 0; attempt < 3 && !ok; ++attempt) {
    ok = cholesky(work, n, l);
    if (!ok) {
      for (std::size_t i = 0; i < n; ++i) work[i * n + i] = k_psd[i * n + i] + jitter;
      jitter *= 10.0;
    }
  }
  require(ok, "sample_gp: Cholesky failed after jitter escalation");
  std::vector<double> z(n);
  for (auto& v : z) v = rng.normal();
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += l[i * n + j] * z[j];
    y[i] = s;
  }
  return y;
}

/// Per-sample standardization to zero mean and unit variance (std floor 1e-8).
inline Tensor normalize(const Tensor& x) {
  const std::size_t n = x.numel();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double std_floor = std::max(std::sqrt(var), 1e-8);
  Tensor y(x.shape(), x.spatial_rank());
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) / std_floor;
  return y;
}

namespace detail {

/// In-place mode product: data viewed as [outer, side, inner] along `axis`,
/// replaced by M (side x side, row-major) applied along that axis.
inline void apply_matrix_along_axis(std::vector<double>& data,
                                    const std::vector<std::size_t>& shape, int axis,
                                    const std::vector<double>& m) {
  const std::size_t side = shape[static_cast<std::size_t>(axis)];
  std::size_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= shape[static_cast<std::size_t>(a)];
  for (std::size_t a = static_cast<std::size_t>(axis) + 1; a < shape.size(); ++a)
    inner *= shape[a];
  std::vector<double> slab(side * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    double* base = data.data() + o * side * inner;
    std::fill(slab.begin(), slab.end(), 0.0);
    for (std::size_t i = 0; i < side; ++i) {
      double* out_row = slab.data() + i * inner;
      const double* mrow = m.data() + i * side;
      for (std::size_t j = 0; j < side; ++j) {
        const double mv = mrow[j];
        if (mv == 0.0) continue;
        const double* in_row = base + j * inner;
        for (std::size_t t = 0; t < inner; ++t) out_row[t] += mv * in_row[t];
      }
    }
    std::copy(slab.begin(), slab.end(), base);
  }
}

}  // namespace detail

/// One GP draw over the regular grid, exact for the product kernels: the
/// grid covariance factorizes as scale^2 * K_1 (x) ... (x) K_d, so each
/// per-axis factor is clipped and factorized independently and the draw is
/// a chain of small mode products instead of an n x n factorization.
inline Tensor sample_gp_grid(int d, std::size_t side, const KernelSpec& spec, CounterRng& rng) {
  const auto xs = grid_axis(side);
  std::vector<std::size_t> shape(static_cast<std::size_t>(d), side);
  shape.push_back(1);

  std::vector<double> chol_factor;
  std::vector<double> factor(side * side);
  std::vector<std::vector<double>> ls(static_cast<std::size_t>(d));
  for (int a = 0; a < d; ++a) {
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j)
        factor[i * side + j] = kernel_eval_1d(spec, xs[i] - xs[j]);
    std::vector<double> clipped = psd_clip(factor, side);
    require(cholesky(clipped, side, ls[static_cast<std::size_t>(a)]) ||
                [&] {
                  // One jitter retry mirrors the full-matrix sampler.
                  for (std::size_t i = 0; i < side; ++i) clipped[i * side + i] += 1e-10;
                  return cholesky(clipped, side, ls[static_cast<std::size_t>(a)]);
                }(),
            "sample_gp_grid: factor Cholesky failed");
  }

  std::size_t n = 1;
  for (int a = 0; a < d; ++a) n *= side;
  std::vector<double> z(n);
  for (auto& v : z) v = rng.normal();
  for (int a = 0; a < d; ++a) detail::apply_matrix_along_axis(z, shape, a, ls[static_cast<std::size_t>(a)]);
  for (auto& v : z) v *= spec.scale;
  return Tensor(std::move(shape), d, std::move(z));
}

// ---------------------------------------------------------------------------
// Labeled sample sets; label 0 = periodic, label 1 = rbf.
// ---------------------------------------------------------------------------

struct GPSample {
  Tensor x;
  int label = 0;
};

struct GPSampleSet {
  int dimension = 2;
  std::size_t grid_side = 0;
  std::uint64_t seed = 0;
  std::vector<GPSample> samples;
};

/// Balanced, deterministic dataset: sample i uses RNG stream (seed, i) and
/// alternates rbf (label 1) / periodic (label 0), each draw normalized.
inline GPSampleSet generate_dataset(int d, std::size_t n_per_class, std::uint64_t seed,
                                    std::size_t grid_side = 0) {
  require(n_per_class >= 1, "generate_dataset: n_per_class must be >= 1");
  GPSampleSet set;
  set.dimension = d;
  set.grid_side = grid_side == 0 ? default_grid_side(d) : grid_side;
  set.seed = seed;
  const std::size_t total = 2 * n_per_class;
  set.samples.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    CounterRng rng(seed, i);
    const bool rbf = (i % 2 == 0);
    KernelSpec spec =
        sample_kernel_spec(rbf ? KernelSpec::Kind::rbf : KernelSpec::Kind::periodic, rng);
    GPSample s;
    s.x = normalize(sample_gp_grid(d, set.grid_side, spec, rng));
    s.label = rbf ? 1 : 0;
    set.samples.push_back(std::move(s));
  }
  return set;
}

/// Prefix split at the sample level; generation interleaves the classes so
/// both sides stay balanced.
inline std::pair<GPSampleSet, GPSampleSet> split(const GPSampleSet& set, double train_frac) {
  require(train_frac > 0.0 && train_frac < 1.0, "split: fraction must be in (0, 1)");
  const std::size_t n_train =
      static_cast<std::size_t>(train_frac * static_cast<double>(set.samples.size()));
  GPSampleSet train = set, val = set;
  train.samples.assign(set.samples.begin(), set.samples.begin() + static_cast<long>(n_train));
  val.samples.assign(set.samples.begin() + static_cast<long>(n_train), set.samples.end());
  return {std::move(train), std::move(val)};
}

// XNND container: magic "XNND", u32 version, u32 dimension, u64 count, then
// one u8 label + XNNT record per sample.
inline void save_dataset(const GPSampleSet& set, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "save_dataset: cannot open ", path);
  io::write_magic(os, "XNND");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(set.dimension));
  io::write_u64(os, set.samples.size());
  for (const auto& s : set.samples) {
    const unsigned char label = static_cast<unsigned char>(s.label);
    os.write(reinterpret_cast<const char*>(&label), 1);
    write_xnnt(os, s.x);
  }
  require(bool(os), "save_dataset: write failed for ", path);
}

inline GPSampleSet load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "load_dataset: cannot open ", path);
  io::check_magic(is, "XNND", "XNND");
  const std::uint32_t version = io::read_u32(is);
  require(version == 1, "XNND: unsupported version ", version);
  GPSampleSet set;
  set.dimension = static_cast<int>(io::read_u32(is));
  const std::uint64_t count = io::read_u64(is);
  set.samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    unsigned char label = 0;
    is.read(reinterpret_cast<char*>(&label), 1);
    require(bool(is), "XNND: truncated sample");
    GPSample s;
    s.label = label;
    s.x = read_xnnt(is);
    set.samples.push_back(std::move(s));
  }
  if (!set.samples.empty() && set.samples[0].x.spatial_rank() >= 1)
    set.grid_side = set.samples[0].x.extent(0);
  return set;
}

}  // namespace xnn
