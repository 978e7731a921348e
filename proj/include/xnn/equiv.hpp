#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "xnn/gxnn.hpp"
#include "xnn/models.hpp"
#include "xnn/ops.hpp"
#include "xnn/rng.hpp"
#include "xnn/sxnn.hpp"

namespace xnn::checks {

// Tolerances used by the property sweeps and the acceptance gate.
inline constexpr double kEquivRelTol = 1e-9;     // layer equivariance, sum/mean paths
inline constexpr double kLogitInvTol = 1e-7;     // end-to-end logit invariance
inline constexpr double kTightAbsTol = 1e-12;    // algebraic identities
inline constexpr double kGradRelTol = 1e-4;      // finite-difference checks
inline constexpr double kFdStep = 1e-5;
inline constexpr double kBceGradRelTol = 1e-6;

inline double linf(const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

/// max |a - b| / (1 + max |b|)
inline double rel_residual(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "rel_residual: shape mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff / (1.0 + linf(b));
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, int spatial_rank, CounterRng& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), spatial_rank);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline std::vector<std::size_t> random_spatial_shape(int k, std::size_t channels, CounterRng& rng,
                                                     std::size_t lo, std::size_t hi,
                                                     bool cubic) {
  std::vector<std::size_t> s;
  const std::size_t first = lo + rng.next_below(hi - lo + 1);
  for (int a = 0; a < k; ++a)
    s.push_back(cubic ? first : lo + rng.next_below(hi - lo + 1));
  s.push_back(channels);
  return s;
}

struct SweepResult {
  double max_residual = 0.0;
  bool exact_violation = false;
  std::size_t cases = 0;

  void fold(double r, bool exact_required) {
    max_residual = std::max(max_residual, r);
    if (exact_required && r != 0.0) exact_violation = true;
    cases++;
  }
};

// ---------------------------------------------------------------------------
// Set-based layer equivariance: every inner op x aggregation x permutation
// set, with and without downsampling branches, against all K! test
// permutations.
// ---------------------------------------------------------------------------

inline SweepResult sxnn_equivariance_sweep(int rank, int trials, std::uint64_t seed) {
  SweepResult res;
  const auto test_perms = all_permutations(rank);
  const Aggregation aggs[] = {Aggregation::sum, Aggregation::mean, Aggregation::max};
  const PermSet sets[] = {PermSet::cyclic, PermSet::all_factorial};

  CounterRng rng(seed, static_cast<std::uint64_t>(rank));
  for (int trial = 0; trial < trials; ++trial) {
    for (Aggregation agg : aggs) {
      const bool exact = agg == Aggregation::max;
      const PoolMode pool = exact ? PoolMode::max : PoolMode::avg;
      for (PermSet set : sets) {
        for (int strided = 0; strided < 2; ++strided) {
          // conv inner op
          {
            ConvSpec cs;
            cs.kernel = strided ? 2 : 3;
            cs.stride = strided ? 2 : 1;
            cs.padding = strided ? Padding::valid : Padding::same;
            cs.in_channels = 2;
            cs.out_channels = 3;
            Tensor x = random_tensor(random_spatial_shape(rank, 2, rng, 2, 6, false), rank, rng);
            Tensor w = random_tensor(conv_weight_shape(cs), 2, rng);
            Tensor b = random_tensor({3}, 0, rng);
            Tensor y = axial_conv(x, w, b, cs, agg, set, pool);
            for (const auto& p : test_perms) {
              Tensor y2 = axial_conv(permute(x, p), w, b, cs, agg, set, pool);
              Tensor ref = permute(y, p);
              res.fold(exact && bit_equal(y2, ref) ? 0.0 : rel_residual(y2, ref), exact);
            }
          }
          // linear inner op (cubic input)
          {
            Tensor x = random_tensor(random_spatial_shape(rank, 2, rng, 2, 6, true), rank, rng);
            const std::size_t n = x.extent(0);
            const std::size_t out_len = strided ? (n + 1) / 2 : n;
            Tensor w = random_tensor({n * 2, out_len * 3}, 1, rng);
            Tensor b = random_tensor({out_len * 3}, 0, rng);
            Tensor y = axial_linear(x, w, b, out_len, 3, agg, set, pool);
            for (const auto& p : test_perms) {
              Tensor y2 = axial_linear(permute(x, p), w, b, out_len, 3, agg, set, pool);
              Tensor ref = permute(y, p);
              res.fold(exact && bit_equal(y2, ref) ? 0.0 : rel_residual(y2, ref), exact);
            }
          }
          // attention inner op (no strided variant)
          if (!strided) {
            Tensor x = random_tensor(random_spatial_shape(rank, 4, rng, 2, 6, false), rank, rng);
            Tensor wq = random_tensor({4, 4}, 1, rng);
            Tensor wk = random_tensor({4, 4}, 1, rng);
            Tensor wv = random_tensor({4, 4}, 1, rng);
            Tensor wo = random_tensor({4, 4}, 1, rng);
            Tensor y = axial_attention(x, wq, wk, wv, wo, 2, agg, set);
            for (const auto& p : test_perms) {
              Tensor y2 = axial_attention(permute(x, p), wq, wk, wv, wo, 2, agg, set);
              Tensor ref = permute(y, p);
              res.fold(exact && bit_equal(y2, ref) ? 0.0 : rel_residual(y2, ref), exact);
            }
          }
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Graph-based layer equivariance: lift / subsequent / pool_features through
// the induced-permutation law, plus the structural psi requirement.
// ---------------------------------------------------------------------------

inline double features_residual(const AxialFeatures<Tensor>& a, const AxialFeatures<Tensor>& b) {
  double r = 0.0;
  for (std::size_t i = 0; i < a.feats.size(); ++i)
    r = std::max(r, rel_residual(a.feats[i], b.feats[i]));
  return r;
}

inline SweepResult gxnn_equivariance_sweep(int rank, int trials, std::uint64_t seed) {
  require(rank >= 2, "gxnn sweep: rank must be >= 2");
  SweepResult res;
  const auto test_perms = all_permutations(rank);
  CounterRng rng(seed, 0x9000u + static_cast<std::uint64_t>(rank));

  // The k2/s2 lifting conv maps lengths {2,3}->1, {4,5}->2, {6,7}->3; drawing
  // all axes from one bucket keeps the per-axis targets equal, which the
  // lifting layer requires of non-cubic inputs.
  auto bucket_shape = [&rng](int k) {
    const std::size_t base = 2 + 2 * rng.next_below(3);
    std::vector<std::size_t> s;
    for (int a = 0; a < k; ++a) s.push_back(base + rng.next_below(2));
    s.push_back(2);
    return s;
  };

  for (int trial = 0; trial < trials; ++trial) {
    const Aggregation lift_agg = trial % 2 == 0 ? Aggregation::max : Aggregation::sum;

    LiftSpec ls;
    ls.conv.kernel = 2;
    ls.conv.stride = 2;
    ls.conv.padding = Padding::valid;
    ls.conv.in_channels = 2;
    ls.conv.out_channels = 4;
    ls.conv.spatial_arity = 2;
    ls.lead_pool = PoolMode::avg;
    ls.agg = lift_agg;
    ls.phi = PhiKind::ignore_node;

    Tensor x = random_tensor(bucket_shape(rank), rank, rng);
    Tensor lw = random_tensor(conv_weight_shape(ls.conv), 3, rng);
    Tensor lb = random_tensor({4}, 0, rng);
    const auto h = lift(x, ls, lw, lb);

    SubsequentSpec conv_spec;
    conv_spec.psi = SubsequentSpec::Psi::conv_pair;
    conv_spec.conv.kernel = 3;
    conv_spec.conv.stride = 1;
    conv_spec.conv.padding = Padding::same;
    conv_spec.conv.in_channels = 4;
    conv_spec.conv.out_channels = 4;
    conv_spec.conv.spatial_arity = 2;
    conv_spec.agg = Aggregation::max;
    conv_spec.phi = PhiKind::node_neighbor_max;

    SubsequentSpec attn_spec;
    attn_spec.psi = SubsequentSpec::Psi::attention;
    attn_spec.heads = 2;
    attn_spec.agg = trial % 2 == 0 ? Aggregation::mean : Aggregation::sum;
    attn_spec.phi = PhiKind::residual;
    attn_spec.self_edge = true;

    SubParams<Tensor> cp;
    cp.node_w = random_tensor(conv_weight_shape(conv_spec.conv), 3, rng);
    cp.node_b = random_tensor({4}, 0, rng);
    cp.nbr_w = random_tensor(conv_weight_shape(conv_spec.conv), 3, rng);
    cp.nbr_b = random_tensor({4}, 0, rng);
    SubParams<Tensor> ap;
    ap.wq = random_tensor({4, 4}, 1, rng);
    ap.wk = random_tensor({4, 4}, 1, rng);
    ap.wv = random_tensor({4, 4}, 1, rng);
    ap.wo = random_tensor({4, 4}, 1, rng);

    const auto h_conv = subsequent(h, conv_spec, cp);
    const auto h_attn = subsequent(h, attn_spec, ap);
    const Tensor pooled = pool_features(h_attn, Aggregation::max);
    const Tensor end_to_end = pool_features(subsequent(h_conv, attn_spec, ap), lift_agg);

    for (const auto& p : test_perms) {
      const Tensor xp = permute(x, p);
      // The lifting layer obeys the induced-permutation law.
      res.fold(features_residual(lift(xp, ls, lw, lb), apply_induced(h, p)), false);
      // Subsequent layers commute with the induced rearrangement.
      res.fold(features_residual(subsequent(apply_induced(h, p), conv_spec, cp),
                                 apply_induced(h_conv, p)),
               false);
      res.fold(features_residual(subsequent(apply_induced(h, p), attn_spec, ap),
                                 apply_induced(h_attn, p)),
               false);
      // Pooling layer equivariance.
      res.fold(rel_residual(pool_features(apply_induced(h_attn, p), Aggregation::max),
                            permute(pooled, p)),
               false);
      // Whole pipeline, lift -> conv -> attention -> pool.
      const Tensor e2e_p = pool_features(
          subsequent(subsequent(lift(xp, ls, lw, lb), conv_spec, cp), attn_spec, ap), lift_agg);
      res.fold(rel_residual(e2e_p, permute(end_to_end, p)), false);
    }
  }
  return res;
}

/// Structural requirement on psi in subsequent layers: it must commute with
/// every permutation of the feature's leading axes.
inline SweepResult psi_structural_sweep(int rank, int trials, std::uint64_t seed) {
  SweepResult res;
  CounterRng rng(seed, 0xA11);
  ConvSpec cs;
  cs.kernel = 3;
  cs.stride = 1;
  cs.padding = Padding::same;
  cs.in_channels = 2;
  cs.out_channels = 2;
  cs.spatial_arity = 2;

  for (int trial = 0; trial < trials; ++trial) {
    Tensor h = random_tensor(random_spatial_shape(rank, 2, rng, 2, 5, false), rank, rng);
    Tensor w = random_tensor(conv_weight_shape(cs), 3, rng);
    Tensor b = random_tensor({2}, 0, rng);
    Tensor y = detail::psi_pair_sym(h, cs, w, b, Aggregation::max);
    for (const auto& q : all_permutations(rank - 1)) {
      std::vector<int> ext = q.targets();
      ext.push_back(rank - 1);
      const AxisPerm qk = AxisPerm::from_targets(std::move(ext));
      const double r = rel_residual(detail::psi_pair_sym(permute(h, qk), cs, w, b,
                                                         Aggregation::max),
                                    permute(y, qk));
      res.fold(r, false);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// End-to-end model invariance.
// ---------------------------------------------------------------------------

inline SweepResult model_invariance_sweep(ModelKind kind, const std::string& preset, int rank,
                                          int trials, std::uint64_t seed) {
  SweepResult res;
  ModelConfig cfg = model_preset(kind, preset, seed);
  const Model model = build(cfg);
  CounterRng rng(seed, 0xE0 + static_cast<std::uint64_t>(rank));
  const auto perms = all_permutations(rank);
  const std::size_t lo = static_cast<std::size_t>(cfg.embed_kernel);

  for (int trial = 0; trial < trials; ++trial) {
    Tensor x = random_tensor(random_spatial_shape(rank, 1, rng, lo, lo + 2, false), rank, rng);
    const double z = forward_logit(model, x);
    for (const auto& p : perms) {
      const double zp = forward_logit(model, permute(x, p));
      res.fold(std::abs(zp - z) / (1.0 + std::abs(z)), false);
    }
  }
  return res;
}

/// Largest invariance violation found for the rank-3 CNN baseline; the
/// baseline is expected to fail, so large values are the healthy outcome.
inline double cnn3d_counterexample(int trials, std::uint64_t seed) {
  ModelConfig cfg = model_preset(ModelKind::cnn3d, "appendixD", seed);
  const Model model = build(cfg);
  CounterRng rng(seed, 0xCE);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    Tensor c = random_tensor({6, 6, 6, 1}, 3, rng);
    const double zc = forward_logit(model, c);
    for (const auto& p : all_permutations(3)) {
      if (p.is_identity()) continue;
      const double zp = forward_logit(model, permute(c, p));
      worst = std::max(worst, std::abs(zp - zc) / (1.0 + std::abs(zc)));
    }
  }
  return worst;
}

}  // namespace xnn::checks
