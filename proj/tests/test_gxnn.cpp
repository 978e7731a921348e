#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "xnn/equiv.hpp"
#include "xnn/gxnn.hpp"
#include "xnn/rng.hpp"

using namespace xnn;
using checks::random_tensor;

namespace {

LiftSpec conv_lift_spec(int cin, int cout, Aggregation agg) {
  LiftSpec ls;
  ls.conv.kernel = 2;
  ls.conv.stride = 2;
  ls.conv.padding = Padding::valid;
  ls.conv.in_channels = cin;
  ls.conv.out_channels = cout;
  ls.conv.spatial_arity = 2;
  ls.lead_pool = PoolMode::avg;
  ls.agg = agg;
  ls.phi = PhiKind::ignore_node;
  return ls;
}

}  // namespace

TEST_SUITE_BEGIN("gxnn");

TEST_CASE("rank-3 conv lifting matches the six-transform literal expansion") {
  CounterRng rng(3);
  Tensor x = random_tensor({4, 5, 4, 1}, 3, rng);
  LiftSpec ls = conv_lift_spec(1, 2, Aggregation::sum);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({2}, 0, rng);

  auto psi = [&](const AxisPerm& t) {
    Tensor u = permute(x, t);
    Tensor v = conv_lastaxes(u, w, b, ls.conv);
    // Pool_1 reduces the leading axis to its own conv output length.
    const std::size_t lead = u.extent(0);
    const std::size_t target = conv_out_len(lead, ls.conv);
    if (target != v.extent(0)) v = adaptive_pool(v, {0}, {target}, PoolMode::avg);
    return v;
  };
  const AxisPerm t13 = AxisPerm::from_cycle(3, {1, 3});
  const AxisPerm t132 = AxisPerm::from_cycle(3, {1, 3, 2});
  const AxisPerm t23 = AxisPerm::from_cycle(3, {2, 3});
  const AxisPerm t123 = AxisPerm::from_cycle(3, {1, 2, 3});
  const AxisPerm t12 = AxisPerm::from_cycle(3, {1, 2});
  const AxisPerm id = AxisPerm::identity(3);

  Tensor h_h = add(permute(psi(t13), compose(t13, t13.inverse())),
                   permute(psi(t132), compose(t13, t132.inverse())));
  Tensor h_w = add(permute(psi(t23), compose(t23, t23.inverse())),
                   permute(psi(t123), compose(t23, t123.inverse())));
  Tensor h_d = add(psi(id), permute(psi(t12), t12.inverse()));

  const auto got = lift(x, ls, w, b);
  REQUIRE(got.k == 3);
  CHECK(checks::bit_equal(got.feats[0], h_h));
  CHECK(checks::bit_equal(got.feats[1], h_w));
  CHECK(checks::bit_equal(got.feats[2], h_d));
}

TEST_CASE("rank-2 lifting drops the self edge: one psi evaluation per feature") {
  CounterRng rng(5);
  Tensor x = random_tensor({4, 5, 2}, 2, rng);
  LiftSpec ls = conv_lift_spec(2, 3, Aggregation::sum);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({3}, 0, rng);
  const auto got = lift(x, ls, w, b);

  // h_H sees [W, H] through the pair transform; h_W sees [H, W] directly.
  const AxisPerm t12 = AxisPerm::from_cycle(2, {1, 2});
  Tensor h_h = conv_lastaxes(permute(x, t12), w, b, ls.conv);
  Tensor h_w = conv_lastaxes(x, w, b, ls.conv);
  CHECK(checks::bit_equal(got.feats[0], h_h));
  CHECK(checks::bit_equal(got.feats[1], h_w));
}

TEST_CASE("constant cubic input lifts to identical constant features") {
  LiftSpec ls = conv_lift_spec(1, 2, Aggregation::max);
  Tensor x({4, 4, 4, 1}, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = 0.75;
  CounterRng rng(7);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({2}, 0, rng);
  const auto h = lift(x, ls, w, b);
  for (int i = 1; i < 3; ++i)
    CHECK(checks::rel_residual(h.feats[static_cast<std::size_t>(i)], h.feats[0]) <= 1e-15);
  // Constant over space within each channel too.
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < h.feats[0].numel(); i += 2)
      CHECK(h.feats[0][i + c] == h.feats[0][c]);
}

TEST_CASE("lift rejects unequal per-axis output lengths") {
  CounterRng rng(43);
  LiftSpec ls = conv_lift_spec(1, 2, Aggregation::max);
  // k2/s2 maps 4 -> 2 but 6 -> 3: the family would not share a shape.
  Tensor x = random_tensor({4, 6, 4, 1}, 3, rng);
  CHECK_THROWS_AS(lift(x, ls, random_tensor(conv_weight_shape(ls.conv), 3, rng),
                       random_tensor({2}, 0, rng)),
                  Error);
}

TEST_CASE("pool_features rejects families that cannot align") {
  CounterRng rng(47);
  AxialFeatures<Tensor> h;
  h.k = 2;
  h.feats.push_back(random_tensor({2, 3, 1}, 2, rng));
  h.feats.push_back(random_tensor({2, 3, 1}, 2, rng));  // same shape, wrong order
  // After inverse reordering the shapes disagree: [3,2] vs [2,3].
  CHECK_THROWS_AS(pool_features(h, Aggregation::sum), Error);
}

TEST_CASE("lift rejects rank-1 input; lift_1d rejects higher ranks") {
  CounterRng rng(11);
  LiftSpec ls = conv_lift_spec(1, 2, Aggregation::max);
  Tensor x1 = random_tensor({8, 1}, 1, rng);
  Tensor x2 = random_tensor({4, 4, 1}, 2, rng);
  CHECK_THROWS_AS(lift(x1, ls, random_tensor(conv_weight_shape(ls.conv), 3, rng),
                       random_tensor({2}, 0, rng)),
                  Error);
  CHECK_THROWS_AS(lift_1d(x2, ls, random_tensor(conv_weight_shape(ls.conv), 3, rng),
                          random_tensor({2}, 0, rng)),
                  Error);
}

TEST_CASE("rank-1 lifting equals a 1D conv with the row-summed kernel") {
  CounterRng rng(13);
  LiftSpec ls;
  ls.conv.kernel = 3;
  ls.conv.stride = 3;
  ls.conv.padding = Padding::valid;
  ls.conv.in_channels = 1;
  ls.conv.out_channels = 1;
  ls.conv.spatial_arity = 2;
  Tensor x = random_tensor({9, 1}, 1, rng);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({1}, 0, rng);

  const auto h = lift_1d(x, ls, w, b);
  REQUIRE(h.k == 1);
  // The repeated rows make the 2D kernel act as its synthetic-axis sum.
  std::vector<double> wsum(3, 0.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t t = 0; t < 3; ++t) wsum[t] += w[r * 3 + t];
  auto ref = oracle::conv1d(std::vector<double>(x.values()), wsum, b[0], 3, 0, 0);
  REQUIRE(h.feats[0].numel() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(std::abs(h.feats[0][i] - ref[i]) <= 1e-12);
}

TEST_CASE("rank-1 lifting with a size-1 kernel is a pointwise map") {
  CounterRng rng(17);
  LiftSpec ls;
  ls.conv.kernel = 1;
  ls.conv.stride = 1;
  ls.conv.padding = Padding::valid;
  ls.conv.in_channels = 2;
  ls.conv.out_channels = 2;
  ls.conv.spatial_arity = 2;
  Tensor x = random_tensor({5, 2}, 1, rng);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({2}, 0, rng);
  const auto h = lift_1d(x, ls, w, b);
  CHECK(h.feats[0].shape() == x.shape());
  // Pointwise: every position maps channels through the same 2x2 matrix.
  for (std::size_t l = 0; l < 5; ++l)
    for (std::size_t c = 0; c < 2; ++c) {
      const double expect = b[c] + x[l * 2] * w[c] + x[l * 2 + 1] * w[2 + c];
      CHECK(std::abs(h.feats[0][l * 2 + c] - expect) <= 1e-14);
    }
}

TEST_CASE("induced permutation basics") {
  const AxisPerm id3 = AxisPerm::identity(3);
  for (int i = 0; i < 3; ++i) {
    const auto ip = induced_perm(id3, i);
    CHECK(ip.feature == i);
    CHECK(ip.perm.is_identity());
  }
  const AxisPerm swap2 = AxisPerm::from_cycle(2, {1, 2});
  const auto ip0 = induced_perm(swap2, 0);
  CHECK(ip0.feature == 1);
  CHECK(ip0.perm.is_identity());
}

TEST_CASE("induced permutation law verified numerically at rank 3") {
  CounterRng rng(19);
  Tensor x = random_tensor({4, 5, 4, 1}, 3, rng);
  LiftSpec ls = conv_lift_spec(1, 2, Aggregation::max);
  Tensor w = random_tensor(conv_weight_shape(ls.conv), 3, rng);
  Tensor b = random_tensor({2}, 0, rng);
  const auto h = lift(x, ls, w, b);
  const AxisPerm p = AxisPerm::from_cycle(3, {1, 3, 2});
  const auto hp = lift(permute(x, p), ls, w, b);
  for (int i = 0; i < 3; ++i) {
    const auto ip = induced_perm(p, i);
    const Tensor expect = permute(h.feats[static_cast<std::size_t>(i)], ip.perm);
    CHECK(checks::rel_residual(hp.feats[static_cast<std::size_t>(ip.feature)], expect) <=
          checks::kEquivRelTol);
  }
}

TEST_CASE("zero psi with a residual phi is the identity on features") {
  CounterRng rng(23);
  Tensor x = random_tensor({4, 4, 4, 1}, 3, rng);
  LiftSpec ls = conv_lift_spec(1, 4, Aggregation::sum);
  const auto h = lift(x, ls, random_tensor(conv_weight_shape(ls.conv), 3, rng),
                      random_tensor({4}, 0, rng));
  SubsequentSpec spec;
  spec.psi = SubsequentSpec::Psi::attention;
  spec.heads = 2;
  spec.agg = Aggregation::sum;
  spec.phi = PhiKind::residual;
  spec.self_edge = true;
  SubParams<Tensor> p;
  p.wq = random_tensor({4, 4}, 1, rng);
  p.wk = random_tensor({4, 4}, 1, rng);
  p.wv = random_tensor({4, 4}, 1, rng);
  p.wo = Tensor({4, 4}, 1);  // zero output projection kills the message
  const auto out = subsequent(h, spec, p);
  for (int i = 0; i < 3; ++i)
    CHECK(checks::bit_equal(out.feats[static_cast<std::size_t>(i)],
                            h.feats[static_cast<std::size_t>(i)]));
}

TEST_CASE("rank-3 attention layer matches the three-line literal form") {
  CounterRng rng(29);
  Tensor x = random_tensor({4, 4, 4, 1}, 3, rng);
  LiftSpec ls = conv_lift_spec(1, 4, Aggregation::sum);
  const auto h = lift(x, ls, random_tensor(conv_weight_shape(ls.conv), 3, rng),
                      random_tensor({4}, 0, rng));

  SubsequentSpec spec;
  spec.psi = SubsequentSpec::Psi::attention;
  spec.heads = 2;
  spec.agg = Aggregation::sum;
  spec.phi = PhiKind::residual;
  spec.self_edge = true;
  SubParams<Tensor> p;
  p.wq = random_tensor({4, 4}, 1, rng);
  p.wk = random_tensor({4, 4}, 1, rng);
  p.wv = random_tensor({4, 4}, 1, rng);
  p.wo = random_tensor({4, 4}, 1, rng);
  const auto got = subsequent(h, spec, p);

  auto sa = [&](const Tensor& t) {
    return self_attention_lastaxis(t, p.wq, p.wk, p.wv, p.wo, 2);
  };
  const AxisPerm t13 = AxisPerm::to_last(3, 1);
  const AxisPerm t23 = AxisPerm::to_last(3, 2);
  const AxisPerm t33 = AxisPerm::to_last(3, 3);
  const Tensor sh = sa(h.feats[0]), sw = sa(h.feats[1]), sd = sa(h.feats[2]);

  // Literal Eq.-style lines: each target re-aligns every message.
  auto line = [&](const Tensor& base, const AxisPerm& ti) {
    Tensor acc = permute(permute(sh, t13.inverse()), ti);
    acc = add(acc, permute(permute(sw, t23.inverse()), ti));
    acc = add(acc, permute(permute(sd, t33.inverse()), ti));
    return add(base, acc);
  };
  CHECK(checks::rel_residual(got.feats[0], line(h.feats[0], t13)) <= 1e-12);
  CHECK(checks::rel_residual(got.feats[1], line(h.feats[1], t23)) <= 1e-12);
  CHECK(checks::rel_residual(got.feats[2], line(h.feats[2], t33)) <= 1e-12);

  // Shared-message refactoring: m computed once, re-permuted per target.
  Tensor m = add(add(permute(sh, t13.inverse()), permute(sw, t23.inverse())),
                 permute(sd, t33.inverse()));
  CHECK(checks::rel_residual(got.feats[0], add(h.feats[0], permute(m, t13))) <= 1e-12);
}

TEST_CASE("single-feature families pass through subsequent layers") {
  CounterRng rng(31);
  AxialFeatures<Tensor> h;
  h.k = 1;
  h.feats.push_back(random_tensor({6, 4}, 1, rng));
  SubsequentSpec spec;
  spec.psi = SubsequentSpec::Psi::attention;
  spec.heads = 2;
  spec.agg = Aggregation::mean;
  spec.phi = PhiKind::residual;
  spec.self_edge = false;  // the lone node is its own message source
  SubParams<Tensor> p;
  p.wq = random_tensor({4, 4}, 1, rng);
  p.wk = random_tensor({4, 4}, 1, rng);
  p.wv = random_tensor({4, 4}, 1, rng);
  p.wo = random_tensor({4, 4}, 1, rng);
  const auto out = subsequent(h, spec, p);
  const Tensor expect = add(h.feats[0], self_attention_lastaxis(h.feats[0], p.wq, p.wk, p.wv,
                                                                p.wo, 2));
  CHECK(checks::rel_residual(out.feats[0], expect) <= 1e-14);
}

TEST_CASE("subsequent rejects mismatched feature shapes") {
  CounterRng rng(37);
  AxialFeatures<Tensor> h;
  h.k = 2;
  h.feats.push_back(random_tensor({3, 4, 2}, 2, rng));
  h.feats.push_back(random_tensor({4, 3, 2}, 2, rng));
  SubsequentSpec spec;
  spec.psi = SubsequentSpec::Psi::attention;
  spec.heads = 1;
  SubParams<Tensor> p;
  p.wq = random_tensor({2, 2}, 1, rng);
  p.wk = random_tensor({2, 2}, 1, rng);
  p.wv = random_tensor({2, 2}, 1, rng);
  p.wo = random_tensor({2, 2}, 1, rng);
  CHECK_THROWS_AS(subsequent(h, spec, p), Error);
}

TEST_CASE("pool_features merges aligned features") {
  CounterRng rng(41);
  // K = 1: the pooled family is the single feature.
  AxialFeatures<Tensor> h1;
  h1.k = 1;
  h1.feats.push_back(random_tensor({5, 2}, 1, rng));
  CHECK(checks::bit_equal(pool_features(h1, Aggregation::sum), h1.feats[0]));

  // Equal axis-symmetric features: sum gives K*h, mean and max give h.
  Tensor sym = random_tensor({3, 3, 1}, 2, rng);
  sym = scale(add(sym, permute(sym, AxisPerm::from_cycle(2, {1, 2}))), 0.5);
  AxialFeatures<Tensor> h2;
  h2.k = 2;
  h2.feats = {sym, sym};
  CHECK(checks::rel_residual(pool_features(h2, Aggregation::sum), scale(sym, 2.0)) <= 1e-15);
  CHECK(checks::bit_equal(pool_features(h2, Aggregation::max), sym));
  CHECK(checks::rel_residual(pool_features(h2, Aggregation::mean), sym) <= 1e-15);
}

TEST_CASE("pair-conv psi commutes with leading-axis permutations") {
  for (int rank = 2; rank <= 3; ++rank) {
    auto res = checks::psi_structural_sweep(rank, 3, 99);
    INFO("rank ", rank, " residual ", res.max_residual);
    CHECK(res.max_residual <= checks::kTightAbsTol);
  }
}

TEST_CASE("equivariance sweep at small scale") {
  for (int rank = 2; rank <= 3; ++rank) {
    auto res = checks::gxnn_equivariance_sweep(rank, 2, 555);
    INFO("rank ", rank, " residual ", res.max_residual);
    CHECK(res.max_residual <= checks::kEquivRelTol);
  }
}

TEST_SUITE_END();
