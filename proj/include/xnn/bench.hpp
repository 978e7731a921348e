#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "xnn/axis_perm.hpp"
#include "xnn/ops.hpp"
#include "xnn/rng.hpp"

namespace xnn {

/// Multiply counts and wall clocks for axial vs. flattened self-attention on
/// one tensor shape.  Score MACs are tallied inside the attention kernel (the
/// q.k and p.v contractions, the parts quadratic in sequence length).  The
/// per-batch-position convention divides each branch's tally by its batch row
/// count, giving sum_i L_i^2 for the axial form and (prod L)^2 flattened.
struct AttentionBench {
  std::vector<std::size_t> spatial;
  std::size_t channels = 0;
  int heads = 1;
  std::uint64_t axial_macs = 0;       // measured, all branches
  std::uint64_t flat_macs = 0;        // measured, single flattened pass
  double axial_entries_per_row = 0;   // sum_i L_i^2
  double flat_entries_per_row = 0;    // (prod_i L_i)^2
  double per_row_ratio = 0;
  double axial_seconds = 0;
  double flat_seconds = 0;
};

inline AttentionBench bench_axial_attention(const std::vector<std::size_t>& spatial,
                                            std::size_t channels, int heads,
                                            std::uint64_t seed) {
  const int k = static_cast<int>(spatial.size());
  AttentionBench r;
  r.spatial = spatial;
  r.channels = channels;
  r.heads = heads;

  std::vector<std::size_t> shape = spatial;
  shape.push_back(channels);
  CounterRng rng(seed, 0xBE);
  Tensor x(shape, k);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  AttentionParams p;
  p.heads = heads;
  p.wq = Tensor({channels, channels}, 1);
  p.wk = Tensor({channels, channels}, 1);
  p.wv = Tensor({channels, channels}, 1);
  p.wo = Tensor({channels, channels}, 1);
  for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo})
    for (std::size_t i = 0; i < w->numel(); ++i) (*w)[i] = rng.uniform(-0.5, 0.5);

  std::size_t total = 1;
  for (auto e : spatial) total *= e;

  // Axial: one branch per cyclic rotation, measured per branch.
  detail::attn_score_macs() = 0;
  const auto t0 = std::chrono::steady_clock::now();
  double per_row = 0.0;
  for (const auto& rot : cyclic_rotations(k)) {
    const std::uint64_t before = detail::attn_score_macs();
    Tensor u = permute(x, rot);
    Tensor y = self_attention_lastaxis(u, p);
    (void)y;
    const std::uint64_t macs = detail::attn_score_macs() - before;
    const std::size_t L = u.extent(static_cast<std::size_t>(k - 1));
    const std::size_t rows = total / L;
    per_row += static_cast<double>(macs) / (2.0 * static_cast<double>(channels) *
                                            static_cast<double>(rows));
  }
  r.axial_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.axial_macs = detail::attn_score_macs();
  r.axial_entries_per_row = per_row;

  // Flattened: the whole grid as one sequence.
  detail::attn_score_macs() = 0;
  Tensor flat = reshape(x, {total, channels}, 1);
  const auto t1 = std::chrono::steady_clock::now();
  Tensor yf = self_attention_lastaxis(flat, p);
  (void)yf;
  r.flat_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  r.flat_macs = detail::attn_score_macs();
  detail::attn_score_macs() = 0;
  r.flat_entries_per_row =
      static_cast<double>(r.flat_macs) / (2.0 * static_cast<double>(channels));

  r.per_row_ratio = r.axial_entries_per_row / r.flat_entries_per_row;
  return r;
}

}  // namespace xnn
