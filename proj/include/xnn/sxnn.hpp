#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "xnn/autodiff.hpp"
#include "xnn/axis_perm.hpp"
#include "xnn/common.hpp"
#include "xnn/ops.hpp"

namespace xnn {

/// Permutation-invariant merge of branch outputs.  Sum and mean accumulate in
/// fixed branch order; mean divides once after the summation.
enum class Aggregation { sum, mean, max };

enum class PermSet { all_factorial, cyclic };

namespace detail {

template <class T>
T aggregate_branches(const std::vector<T>& items, Aggregation agg) {
  T acc = items[0];
  for (std::size_t i = 1; i < items.size(); ++i)
    acc = (agg == Aggregation::max) ? max_merge(acc, items[i]) : add(acc, items[i]);
  if (agg == Aggregation::mean && items.size() > 1)
    acc = scale(acc, 1.0 / static_cast<double>(items.size()));
  return acc;
}

inline std::vector<AxisPerm> perm_set(PermSet set, int k) {
  return set == PermSet::cyclic ? cyclic_rotations(k) : all_permutations(k);
}

inline bool is_cubic(const Tensor& t) {
  for (int a = 1; a < t.spatial_rank(); ++a)
    if (t.extent(static_cast<std::size_t>(a)) != t.extent(0)) return false;
  return true;
}

inline const Tensor& plain(const Tensor& t) { return t; }
inline const Tensor& plain(const Var& v) { return v.value(); }

/// Shrink or repeat the leading `count` spatial axes of x to per-axis targets.
template <class T>
T fit_leading_axes(const T& x, int count, const std::vector<std::size_t>& targets,
                   PoolMode pool) {
  T out = x;
  // Integer upsampling first (repeat), then pooling for the rest.
  for (int a = 0; a < count; ++a) {
    const std::size_t n = plain(out).extent(static_cast<std::size_t>(a));
    const std::size_t t = targets[static_cast<std::size_t>(a)];
    if (t > n) {
      require(t % n == 0, "fit_leading_axes: target ", t, " is not an integer multiple of ", n);
      out = resize_repeat(out, a, static_cast<int>(t / n));
    }
  }
  std::vector<int> axes;
  std::vector<std::size_t> tg;
  for (int a = 0; a < count; ++a) {
    const std::size_t n = plain(out).extent(static_cast<std::size_t>(a));
    const std::size_t t = targets[static_cast<std::size_t>(a)];
    if (t < n) {
      axes.push_back(a);
      tg.push_back(t);
    }
  }
  if (!axes.empty()) out = adaptive_pool(out, axes, tg, pool);
  return out;
}

}  // namespace detail

/// The rank-K Linear form: cyclic (or full) permutations, a linear layer on
/// the last spatial axis with channels folded in, pooling of the other axes
/// to `target_len`, inverse permutation, aggregation.  Requires a cubic
/// spatial shape so one weight serves every axis.
template <class T>
T axial_linear(const T& x, const T& w, const T& b, std::size_t target_len,
               std::size_t out_channels, Aggregation agg = Aggregation::sum,
               PermSet set = PermSet::cyclic, PoolMode pool = PoolMode::avg) {
  const Tensor& xv = detail::plain(x);
  const int k = xv.spatial_rank();
  require(k >= 1, "axial_linear: need at least one spatial axis");
  require(detail::is_cubic(xv), "axial_linear: spatial shape must be cubic");

  const auto perms = detail::perm_set(set, k);
  std::vector<std::size_t> targets(static_cast<std::size_t>(k), target_len);
  std::vector<T> branches;
  branches.reserve(perms.size());
  for (const auto& p : perms) {
    T u = permute(x, p);
    T v = linear_lastaxis(u, w, b, target_len, out_channels);
    v = detail::fit_leading_axes(v, k - 1, targets, pool);
    branches.push_back(permute(v, p.inverse()));
  }
  return detail::aggregate_branches(branches, agg);
}

/// The rank-K Conv form: Conv1D along the last spatial axis per branch with
/// the other axes pooled to the conv output length of their own extent.
template <class T>
T axial_conv(const T& x, const T& w, const T& b, const ConvSpec& spec,
             Aggregation agg = Aggregation::sum, PermSet set = PermSet::cyclic,
             PoolMode pool = PoolMode::avg) {
  const Tensor& xv = detail::plain(x);
  const int k = xv.spatial_rank();
  require(k >= 1, "axial_conv: need at least one spatial axis");
  require(spec.spatial_arity == 1, "axial_conv: inner conv spans one axis");

  // Every axis is reduced by the conv's output-length map, whether it is the
  // conv'd axis or a pooled one; branch shapes then agree after inversion.
  bool all_identity = true;
  std::vector<std::size_t> out_len(static_cast<std::size_t>(k));
  for (int a = 0; a < k; ++a) {
    out_len[static_cast<std::size_t>(a)] = conv_out_len(xv.extent(static_cast<std::size_t>(a)), spec);
    if (out_len[static_cast<std::size_t>(a)] != xv.extent(static_cast<std::size_t>(a)))
      all_identity = false;
  }

  const auto perms = detail::perm_set(set, k);
  std::vector<T> branches;
  branches.reserve(perms.size());
  for (const auto& p : perms) {
    T u = permute(x, p);
    T v = conv_lastaxes(u, w, b, spec);
    if (!all_identity) {
      // Targets follow the axes as the permutation placed them.
      std::vector<std::size_t> targets(static_cast<std::size_t>(k));
      for (int a = 0; a < k; ++a)
        targets[static_cast<std::size_t>(p.target(a))] = out_len[static_cast<std::size_t>(a)];
      v = detail::fit_leading_axes(v, k - 1, targets, pool);
    }
    branches.push_back(permute(v, p.inverse()));
  }
  return detail::aggregate_branches(branches, agg);
}

/// The rank-K Attn form: self-attention along the last spatial axis per
/// branch; no pooling since attention preserves the sequence length.
template <class T>
T axial_attention(const T& x, const T& wq, const T& wk, const T& wv, const T& wo, int heads,
                  Aggregation agg = Aggregation::mean, PermSet set = PermSet::cyclic) {
  const Tensor& xv = detail::plain(x);
  const int k = xv.spatial_rank();
  require(k >= 1, "axial_attention: need at least one spatial axis");
  const auto perms = detail::perm_set(set, k);
  std::vector<T> branches;
  branches.reserve(perms.size());
  for (const auto& p : perms) {
    T u = permute(x, p);
    T v = self_attention_lastaxis(u, wq, wk, wv, wo, heads);
    branches.push_back(permute(v, p.inverse()));
  }
  return detail::aggregate_branches(branches, agg);
}

// ---------------------------------------------------------------------------
// Declarative layer description + parameter bundle, used by the generic
// combinator entry point.
// ---------------------------------------------------------------------------

struct SXLayerSpec {
  enum class Inner { linear, conv, attention };
  Inner inner = Inner::conv;
  Aggregation agg = Aggregation::sum;
  PermSet set = PermSet::cyclic;
  PoolMode pool = PoolMode::avg;
  ConvSpec conv;                      // inner == conv
  std::size_t linear_out_len = 0;     // inner == linear
  std::size_t linear_out_channels = 1;
  int heads = 1;                      // inner == attention
};

template <class T>
struct SXParams {
  T w, b;              // linear / conv
  T wq, wk, wv, wo;    // attention
};

template <class T>
T sxnn_apply(const T& x, const SXLayerSpec& spec, const SXParams<T>& p) {
  switch (spec.inner) {
    case SXLayerSpec::Inner::linear:
      return axial_linear(x, p.w, p.b, spec.linear_out_len, spec.linear_out_channels, spec.agg,
                          spec.set, spec.pool);
    case SXLayerSpec::Inner::conv:
      return axial_conv(x, p.w, p.b, spec.conv, spec.agg, spec.set, spec.pool);
    case SXLayerSpec::Inner::attention:
      return axial_attention(x, p.wq, p.wk, p.wv, p.wo, spec.heads, spec.agg, spec.set);
  }
  fail("sxnn_apply: unknown inner op");
}

}  // namespace xnn
