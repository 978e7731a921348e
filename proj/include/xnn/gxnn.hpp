#pragma once

#include <cstddef>
#include <vector>

#include "xnn/autodiff.hpp"
#include "xnn/axis_perm.hpp"
#include "xnn/common.hpp"
#include "xnn/ops.hpp"
#include "xnn/sxnn.hpp"

namespace xnn {

/// Indexed family of per-axis features.  Feature i is stored in the canonical
/// order produced by moving source axis i to the last spatial position, so
/// all features of one family share a shape.
template <class T>
struct AxialFeatures {
  int k = 0;
  std::vector<T> feats;
};

// ---------------------------------------------------------------------------
// Lifting layer
// ---------------------------------------------------------------------------

enum class PhiKind { ignore_node, residual, node_neighbor_max };

struct LiftSpec {
  ConvSpec conv;                        // psi: 2D conv over the trailing axis pair
  PoolMode lead_pool = PoolMode::avg;   // reduction of the leading K-2 axes
  Aggregation agg = Aggregation::max;   // merge over neighbor axes j
  PhiKind phi = PhiKind::ignore_node;
};

namespace detail {

template <class T>
std::vector<std::size_t> lift_targets(const Tensor& x, const ConvSpec& spec) {
  std::vector<std::size_t> t(static_cast<std::size_t>(x.spatial_rank()));
  for (int a = 0; a < x.spatial_rank(); ++a)
    t[static_cast<std::size_t>(a)] = conv_out_len(x.extent(static_cast<std::size_t>(a)), spec);
  return t;
}

}  // namespace detail

/// h_i = phi(x moved i-last, agg over j != i of the re-aligned pair conv
/// psi applied with axis j at position K-1 and axis i at position K); the
/// leading K-2 axes are pooled to their own conv output lengths so every
/// branch of every feature lands on the same shape.
template <class T>
AxialFeatures<T> lift(const T& x, const LiftSpec& spec, const T& w, const T& b) {
  const Tensor& xv = detail::plain(x);
  const int k = xv.spatial_rank();
  require(k >= 2, "lift: need spatial rank >= 2 (use lift_1d for rank 1)");
  require(spec.conv.spatial_arity == 2, "lift: psi conv must span two axes");

  const auto out_len = detail::lift_targets<T>(xv, spec.conv);
  bool shape_preserved = true;
  for (int a = 0; a < k; ++a)
    if (out_len[static_cast<std::size_t>(a)] != xv.extent(static_cast<std::size_t>(a)))
      shape_preserved = false;

  // Assumption 1 needs one shape for the whole family: every axis must land
  // on the same output length.  Non-cubic inputs with unequal per-axis
  // targets are rejected.
  for (int a = 1; a < k; ++a)
    require(out_len[static_cast<std::size_t>(a)] == out_len[0],
            "lift: per-axis output lengths differ (", out_len[0], " vs ",
            out_len[static_cast<std::size_t>(a)], "); non-cubic inputs with unequal targets are "
            "not supported");

  AxialFeatures<T> out;
  out.k = k;
  out.feats.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const AxisPerm t_ik = AxisPerm::to_last(k, i + 1);
    std::vector<T> msgs;
    msgs.reserve(static_cast<std::size_t>(k - 1));
    for (int j = 0; j < k; ++j) {
      if (j == i) continue;  // psi(H, H) is omitted
      const AxisPerm pair = AxisPerm::pair_to_last(k, j + 1, i + 1);
      T u = permute(x, pair);
      T v = conv_lastaxes(u, w, b, spec.conv);
      if (k > 2) {
        // Pool positions 0..K-3, each holding some source axis pair^-1(d).
        const AxisPerm pinv = pair.inverse();
        std::vector<int> axes;
        std::vector<std::size_t> targets;
        for (int d = 0; d < k - 2; ++d) {
          const std::size_t want = out_len[static_cast<std::size_t>(pinv.target(d))];
          if (want != detail::plain(v).extent(static_cast<std::size_t>(d))) {
            axes.push_back(d);
            targets.push_back(want);
          }
        }
        if (!axes.empty()) v = adaptive_pool(v, axes, targets, spec.lead_pool);
      }
      msgs.push_back(permute(v, compose(t_ik, pair.inverse())));
    }
    T agg = detail::aggregate_branches(msgs, spec.agg);
    switch (spec.phi) {
      case PhiKind::ignore_node:
        out.feats.push_back(agg);
        break;
      case PhiKind::residual:
        require(shape_preserved &&
                    spec.conv.in_channels == spec.conv.out_channels,
                "lift: residual phi needs a shape-preserving psi");
        out.feats.push_back(add(permute(x, t_ik), agg));
        break;
      case PhiKind::node_neighbor_max:
        require(shape_preserved && spec.conv.in_channels == spec.conv.out_channels,
                "lift: max-merge phi needs a shape-preserving psi");
        out.feats.push_back(max_merge(permute(x, t_ik), agg));
        break;
    }
  }
  return out;
}

/// Rank-1 lifting: repeat the single axis along a synthetic leading axis to
/// the kernel width, run the pair conv, average the synthetic axis away.
template <class T>
AxialFeatures<T> lift_1d(const T& x, const LiftSpec& spec, const T& w, const T& b) {
  const Tensor& xv = detail::plain(x);
  require(xv.spatial_rank() == 1, "lift_1d: input must have spatial rank 1");
  require(spec.conv.spatial_arity == 2, "lift_1d: psi conv must span two axes");
  const std::size_t len = xv.extent(0);
  const std::size_t chan = xv.channels();

  T u = reshape(x, {1, len, chan}, 2);
  u = resize_repeat(u, 0, spec.conv.kernel);
  T v = conv_lastaxes(u, w, b, spec.conv);
  const Tensor& vv = detail::plain(v);
  if (vv.extent(0) > 1) v = adaptive_pool(v, {0}, {std::size_t{1}}, PoolMode::avg);
  const Tensor& vp = detail::plain(v);
  T f = reshape(v, {vp.extent(1), vp.channels()}, 1);

  AxialFeatures<T> out;
  out.k = 1;
  out.feats.push_back(std::move(f));
  return out;
}

// ---------------------------------------------------------------------------
// Induced permutation law: permuting the input by p sends lift feature i to
// slot p(i), re-permuted on its leading axes by  T_(p(i))(K) . p . T_(i)(K).
// ---------------------------------------------------------------------------

struct InducedPerm {
  int feature = 0;  // destination feature index
  AxisPerm perm;    // acts on the feature; fixes the last spatial position
};

inline InducedPerm induced_perm(const AxisPerm& p, int i) {
  const int k = p.k();
  require(i >= 0 && i < k, "induced_perm: bad source feature index");
  const int pi = p.target(i);
  InducedPerm out;
  out.feature = pi;
  out.perm = compose(AxisPerm::to_last(k, pi + 1), compose(p, AxisPerm::to_last(k, i + 1)));
  require(out.perm.target(k - 1) == k - 1, "induced_perm: law violated (last axis moved)");
  return out;
}

/// Rearranges a feature family the way permuting the input by p would.
template <class T>
AxialFeatures<T> apply_induced(const AxialFeatures<T>& h, const AxisPerm& p) {
  AxialFeatures<T> out;
  out.k = h.k;
  out.feats.resize(h.feats.size(), h.feats[0]);
  for (int i = 0; i < h.k; ++i) {
    const InducedPerm ip = induced_perm(p, i);
    out.feats[static_cast<std::size_t>(ip.feature)] =
        permute(h.feats[static_cast<std::size_t>(i)], ip.perm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subsequent (message-passing) layers
// ---------------------------------------------------------------------------

struct SubsequentSpec {
  enum class Psi { conv_pair, attention };
  Psi psi = Psi::conv_pair;
  ConvSpec conv;       // conv_pair: stride-1 'same' conv over the trailing pair
  int heads = 1;       // attention
  Aggregation agg = Aggregation::max;
  PhiKind phi = PhiKind::node_neighbor_max;
  bool self_edge = false;  // include j == i in the aggregated message
};

template <class T>
struct SubParams {
  T node_w, node_b;      // conv_pair node psi
  T nbr_w, nbr_b;        // conv_pair neighbor psi (shared psi for other phis)
  T wq, wk, wv, wo;      // attention psi
};

namespace detail {

/// Pair conv symmetrized over the leading axes: each of the K-1 cyclic
/// rotations of positions 1..K-1 brings one leading axis next to the last
/// axis for the 2D kernel, and the branches are merged in place.  The result
/// commutes with any permutation of the leading axes, which is what the
/// subsequent layers require of psi.  Rank-1 features take the repetition
/// route instead.
template <class T>
T psi_pair_sym(const T& h, const ConvSpec& conv, const T& w, const T& b, Aggregation agg) {
  const Tensor& hv = plain(h);
  const int k = hv.spatial_rank();
  if (k == 1) {
    const std::size_t len = hv.extent(0);
    T u = reshape(h, {1, len, hv.channels()}, 2);
    u = resize_repeat(u, 0, conv.kernel);
    T v = conv_lastaxes(u, w, b, conv);
    const Tensor& vv = plain(v);
    if (vv.extent(0) > 1) v = adaptive_pool(v, {0}, {std::size_t{1}}, PoolMode::avg);
    const Tensor& vp = plain(v);
    return reshape(v, {vp.extent(1), vp.channels()}, 1);
  }
  require(conv.stride == 1 && conv.padding == Padding::same,
          "psi_pair_sym: pair conv must preserve shape (stride 1, same padding)");
  std::vector<T> branches;
  branches.reserve(static_cast<std::size_t>(k - 1));
  for (int r = 0; r < k - 1; ++r) {
    std::vector<int> targets(static_cast<std::size_t>(k));
    for (int a = 0; a < k - 1; ++a) targets[static_cast<std::size_t>(a)] = (a + r) % (k - 1);
    targets[static_cast<std::size_t>(k - 1)] = k - 1;
    const AxisPerm rho = AxisPerm::from_targets(std::move(targets));
    T u = permute(h, rho);
    T v = conv_lastaxes(u, w, b, conv);
    branches.push_back(permute(v, rho.inverse()));
  }
  return aggregate_branches(branches, agg);
}

template <class T>
T psi_apply(const T& h, const SubsequentSpec& spec, const SubParams<T>& p, bool node) {
  if (spec.psi == SubsequentSpec::Psi::attention)
    return self_attention_lastaxis(h, p.wq, p.wk, p.wv, p.wo, spec.heads);
  return node ? psi_pair_sym(h, spec.conv, p.node_w, p.node_b, spec.agg)
              : psi_pair_sym(h, spec.conv, p.nbr_w, p.nbr_b, spec.agg);
}

}  // namespace detail

/// h'_i = phi(h_i, realign_i( agg_j realign_j^-1( psi(h_j) ) )).  The shared
/// message is computed once per source feature and re-permuted per target.
template <class T>
AxialFeatures<T> subsequent(const AxialFeatures<T>& h, const SubsequentSpec& spec,
                            const SubParams<T>& p) {
  const int k = h.k;
  require(k >= 1 && h.feats.size() == static_cast<std::size_t>(k),
          "subsequent: malformed feature family");
  for (const auto& f : h.feats)
    require(detail::plain(f).same_shape(detail::plain(h.feats[0])),
            "subsequent: features must share one shape");

  // psi of every source, re-aligned to the original (unswapped) axis order.
  const bool node_split = spec.phi == PhiKind::node_neighbor_max;
  std::vector<T> realigned;
  if (!(node_split && k == 1)) {  // a lone node has no neighbors to message
    realigned.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
      T m = detail::psi_apply(h.feats[static_cast<std::size_t>(j)], spec, p, /*node=*/false);
      realigned.push_back(permute(m, AxisPerm::to_last(k, j + 1)));
    }
  }

  AxialFeatures<T> out;
  out.k = k;
  out.feats.reserve(static_cast<std::size_t>(k));

  if (node_split) {
    for (int i = 0; i < k; ++i) {
      T node = detail::psi_apply(h.feats[static_cast<std::size_t>(i)], spec, p, /*node=*/true);
      if (k == 1) {
        out.feats.push_back(std::move(node));
        continue;
      }
      std::vector<T> others;
      others.reserve(static_cast<std::size_t>(k - 1));
      for (int j = 0; j < k; ++j)
        if (j != i) others.push_back(realigned[static_cast<std::size_t>(j)]);
      T nbr = permute(detail::aggregate_branches(others, spec.agg), AxisPerm::to_last(k, i + 1));
      out.feats.push_back(max_merge(node, nbr));
    }
    return out;
  }

  if (spec.self_edge || k == 1) {
    const T m = detail::aggregate_branches(realigned, spec.agg);
    for (int i = 0; i < k; ++i) {
      T c = permute(m, AxisPerm::to_last(k, i + 1));
      out.feats.push_back(spec.phi == PhiKind::residual
                              ? add(h.feats[static_cast<std::size_t>(i)], c)
                              : std::move(c));
    }
    return out;
  }

  for (int i = 0; i < k; ++i) {
    std::vector<T> others;
    others.reserve(static_cast<std::size_t>(k - 1));
    for (int j = 0; j < k; ++j)
      if (j != i) others.push_back(realigned[static_cast<std::size_t>(j)]);
    T c = permute(detail::aggregate_branches(others, spec.agg), AxisPerm::to_last(k, i + 1));
    out.feats.push_back(spec.phi == PhiKind::residual
                            ? add(h.feats[static_cast<std::size_t>(i)], c)
                            : std::move(c));
  }
  return out;
}

/// Merge the family back into one tensor in the original axis order.
template <class T>
T pool_features(const AxialFeatures<T>& h, Aggregation agg) {
  require(h.k >= 1 && !h.feats.empty(), "pool_features: empty family");
  std::vector<T> aligned;
  aligned.reserve(h.feats.size());
  for (int i = 0; i < h.k; ++i)
    aligned.push_back(permute(h.feats[static_cast<std::size_t>(i)],
                              AxisPerm::to_last(h.k, i + 1)));
  return detail::aggregate_branches(aligned, agg);
}

}  // namespace xnn
