#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "xnn/common.hpp"

namespace xnn {

struct EigResult {
  std::vector<double> values;   // eigenvalues, ascending
  std::vector<double> vectors;  // row-major n x n; column j is eigenvector j
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
/// Throws after `max_sweeps` if the off-diagonal mass has not vanished.
inline EigResult jacobi_eigh(std::vector<double> a, std::size_t n, int max_sweeps = 64) {
  require(a.size() == n * n, "jacobi_eigh: matrix size mismatch");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += std::abs(a[i * n + j]);
    return s;
  };

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double sm = off_norm();
    if (sm == 0.0) break;
    const double thresh = sweep < 3 ? 0.2 * sm / static_cast<double>(n * n) : 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        const double g = 100.0 * std::abs(apq);
        if (sweep > 4 && std::abs(a[p * n + p]) + g == std::abs(a[p * n + p]) &&
            std::abs(a[q * n + q]) + g == std::abs(a[q * n + q])) {
          a[p * n + q] = a[q * n + p] = 0.0;
          continue;
        }
        if (std::abs(apq) <= thresh) continue;
        const double h = a[q * n + q] - a[p * n + p];
        double t;
        if (std::abs(h) + g == std::abs(h)) {
          t = apq / h;
        } else {
          const double theta = 0.5 * h / apq;
          t = 1.0 / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        const double tau = s / (1.0 + c);
        const double hpq = t * apq;
        a[p * n + p] -= hpq;
        a[q * n + q] += hpq;
        a[p * n + q] = a[q * n + p] = 0.0;
        auto rotate = [&](std::vector<double>& m, std::size_t i1, std::size_t j1, std::size_t i2,
                          std::size_t j2) {
          const double g1 = m[i1 * n + j1];
          const double g2 = m[i2 * n + j2];
          m[i1 * n + j1] = g1 - s * (g2 + g1 * tau);
          m[i2 * n + j2] = g2 + s * (g1 - g2 * tau);
        };
        for (std::size_t j = 0; j < p; ++j) rotate(a, j, p, j, q);
        for (std::size_t j = p + 1; j < q; ++j) rotate(a, p, j, j, q);
        for (std::size_t j = q + 1; j < n; ++j) rotate(a, p, j, q, j);
        for (std::size_t j = 0; j < n; ++j) rotate(v, j, p, j, q);
      }
    }
    if (sweep + 1 == max_sweeps && off_norm() != 0.0 && off_norm() > 1e-12 * static_cast<double>(n))
      fail("jacobi_eigh: no convergence after ", max_sweeps, " sweeps");
  }

  EigResult r;
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.values[i] = a[i * n + i];
  r.vectors = std::move(v);
  // Sort ascending, carrying eigenvector columns along.
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::size_t lo = i;
    for (std::size_t j = i + 1; j < n; ++j)
      if (r.values[j] < r.values[lo]) lo = j;
    if (lo != i) {
      std::swap(r.values[i], r.values[lo]);
      for (std::size_t row = 0; row < n; ++row)
        std::swap(r.vectors[row * n + i], r.vectors[row * n + lo]);
    }
  }
  return r;
}

/// Cholesky factorization A = L L^T (L lower, row-major).  Returns false if a
/// non-positive pivot shows up.
inline bool cholesky(const std::vector<double>& a, std::size_t n, std::vector<double>& l) {
  require(a.size() == n * n, "cholesky: matrix size mismatch");
  l.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) return false;
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return true;
}

}  // namespace xnn
