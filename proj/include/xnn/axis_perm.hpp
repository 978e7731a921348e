#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "xnn/common.hpp"
#include "xnn/tensor.hpp"

namespace xnn {

/// Permutation of the K spatial axes of a tensor (the channel axis never
/// moves).  `target(a)` is the position axis `a` is moved to, so the cycle
/// (1 3 2) on a HxWxD tensor sends H to position 3, D to 2, W to 1, giving
/// a WxDxH result.  Axes are 0-based internally; cycle input is 1-based.
class AxisPerm {
 public:
  AxisPerm() = default;

  static AxisPerm identity(int k) {
    AxisPerm p;
    p.map_.resize(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) p.map_[static_cast<std::size_t>(a)] = a;
    return p;
  }

  static AxisPerm from_targets(std::vector<int> targets) {
    AxisPerm p;
    p.map_ = std::move(targets);
    p.check();
    return p;
  }

  /// Single cycle in 1-based axis labels: {1,3,2} maps 1->3, 3->2, 2->1.
  static AxisPerm from_cycle(int k, const std::vector<int>& cycle) {
    AxisPerm p = identity(k);
    require(!cycle.empty(), "from_cycle: empty cycle");
    for (std::size_t i = 0; i < cycle.size(); ++i) {
      const int src = cycle[i] - 1;
      const int dst = cycle[(i + 1) % cycle.size()] - 1;
      require(src >= 0 && src < k && dst >= 0 && dst < k, "from_cycle: axis out of range");
      p.map_[static_cast<std::size_t>(src)] = dst;
    }
    p.check();
    return p;
  }

  /// Transposition of 1-based axes i and j (no-op when i == j).
  static AxisPerm transpose(int k, int i, int j) {
    AxisPerm p = identity(k);
    require(i >= 1 && i <= k && j >= 1 && j <= k, "transpose: axis out of range");
    std::swap(p.map_[static_cast<std::size_t>(i - 1)], p.map_[static_cast<std::size_t>(j - 1)]);
    return p;
  }

  /// The transform moving 1-based axis i to the last position: T_(i)(K).
  static AxisPerm to_last(int k, int i) { return transpose(k, i, k); }

  /// The transform moving 1-based axis j to position K-1 and axis i to
  /// position K; the remaining axes fill the remaining positions in
  /// ascending order.  Requires i != j and K >= 2.
  static AxisPerm pair_to_last(int k, int j, int i) {
    require(k >= 2, "pair_to_last: need K >= 2");
    require(i != j, "pair_to_last: axes must differ");
    require(i >= 1 && i <= k && j >= 1 && j <= k, "pair_to_last: axis out of range");
    std::vector<int> targets(static_cast<std::size_t>(k), -1);
    targets[static_cast<std::size_t>(j - 1)] = k - 2;
    targets[static_cast<std::size_t>(i - 1)] = k - 1;
    int next = 0;
    for (int a = 0; a < k; ++a) {
      if (a == i - 1 || a == j - 1) continue;
      targets[static_cast<std::size_t>(a)] = next++;
    }
    return from_targets(std::move(targets));
  }

  int k() const { return static_cast<int>(map_.size()); }
  int target(int axis) const { return map_[static_cast<std::size_t>(axis)]; }
  const std::vector<int>& targets() const { return map_; }

  bool is_identity() const {
    for (int a = 0; a < k(); ++a)
      if (target(a) != a) return false;
    return true;
  }

  AxisPerm inverse() const {
    std::vector<int> inv(map_.size());
    for (int a = 0; a < k(); ++a) inv[static_cast<std::size_t>(target(a))] = a;
    return from_targets(std::move(inv));
  }

  friend bool operator==(const AxisPerm& a, const AxisPerm& b) { return a.map_ == b.map_; }

 private:
  void check() const {
    std::vector<char> seen(map_.size(), 0);
    for (int t : map_) {
      require(t >= 0 && t < k(), "AxisPerm: target out of range");
      require(!seen[static_cast<std::size_t>(t)], "AxisPerm: mapping is not a bijection");
      seen[static_cast<std::size_t>(t)] = 1;
    }
  }

  std::vector<int> map_;
};

/// compose(p, q): apply q first, then p.
inline AxisPerm compose(const AxisPerm& p, const AxisPerm& q) {
  require(p.k() == q.k(), "compose: rank mismatch ", p.k(), " vs ", q.k());
  std::vector<int> targets(static_cast<std::size_t>(p.k()));
  for (int a = 0; a < p.k(); ++a)
    targets[static_cast<std::size_t>(a)] = p.target(q.target(a));
  return AxisPerm::from_targets(std::move(targets));
}

inline AxisPerm inverse(const AxisPerm& p) { return p.inverse(); }

inline std::vector<AxisPerm> all_permutations(int k) {
  std::vector<int> targets(static_cast<std::size_t>(k));
  for (int a = 0; a < k; ++a) targets[static_cast<std::size_t>(a)] = a;
  std::vector<AxisPerm> out;
  do {
    out.push_back(AxisPerm::from_targets(targets));
  } while (std::next_permutation(targets.begin(), targets.end()));
  return out;
}

/// The K rotations of axis order; rotation r moves axis a to position a + r
/// (mod K), so each axis takes the last slot exactly once across the set.
inline std::vector<AxisPerm> cyclic_rotations(int k) {
  std::vector<AxisPerm> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int r = 0; r < k; ++r) {
    std::vector<int> targets(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) targets[static_cast<std::size_t>(a)] = (a + r) % k;
    out.push_back(AxisPerm::from_targets(std::move(targets)));
  }
  return out;
}

/// Applies p to the spatial axes: output position (.., p(a) holds a, ..).
inline Tensor permute(const Tensor& x, const AxisPerm& p) {
  const int k = x.spatial_rank();
  require(p.k() == k, "permute: perm acts on ", p.k(), " axes but tensor has ", k);
  if (p.is_identity()) return x;

  std::vector<std::size_t> out_shape(x.shape().size());
  for (int a = 0; a < k; ++a)
    out_shape[static_cast<std::size_t>(p.target(a))] = x.extent(static_cast<std::size_t>(a));
  out_shape.back() = x.channels();

  const auto in_strides = x.strides();
  // Walk the output row-major, gathering with the matching input stride:
  // output axis d corresponds to input axis p^-1(d).
  const AxisPerm pinv = p.inverse();
  std::vector<std::size_t> gather(out_shape.size());
  for (int d = 0; d < k; ++d)
    gather[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(pinv.target(d))];
  gather.back() = 1;

  Tensor y(out_shape, k);
  const std::size_t rank = out_shape.size();
  std::vector<std::size_t> idx(rank, 0);
  const double* src = x.data();
  double* dst = y.data();
  const std::size_t n = y.numel();
  std::size_t src_off = 0;
  const std::size_t chan = out_shape.back();
  for (std::size_t i = 0; i < n; i += chan) {
    // Channel axis is contiguous in both layouts.
    for (std::size_t c = 0; c < chan; ++c) dst[i + c] = src[src_off + c];
    // Increment the spatial odometer.
    for (std::size_t d = rank - 1; d-- > 0;) {
      idx[d]++;
      src_off += gather[d];
      if (idx[d] < out_shape[d]) break;
      src_off -= gather[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return y;
}

}  // namespace xnn
