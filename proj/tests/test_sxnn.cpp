#include <doctest.h>

#include <cmath>

#include "xnn/equiv.hpp"
#include "xnn/rng.hpp"
#include "xnn/sxnn.hpp"

using namespace xnn;
using checks::random_tensor;

TEST_SUITE_BEGIN("sxnn");

TEST_CASE("rank 1 layers collapse to a single inner op") {
  CounterRng rng(3);
  Tensor x = random_tensor({7, 2}, 1, rng);
  ConvSpec spec;
  spec.kernel = 3;
  spec.stride = 1;
  spec.padding = Padding::same;
  spec.in_channels = 2;
  spec.out_channels = 3;
  Tensor w = random_tensor(conv_weight_shape(spec), 2, rng);
  Tensor b = random_tensor({3}, 0, rng);
  for (Aggregation agg : {Aggregation::sum, Aggregation::mean, Aggregation::max}) {
    Tensor y = axial_conv(x, w, b, spec, agg, PermSet::cyclic, PoolMode::avg);
    CHECK(checks::bit_equal(y, conv_lastaxes(x, w, b, spec)));
  }
}

TEST_CASE("axial 2x2 conv with avg pooling equals the symmetrized-kernel conv") {
  CounterRng rng(5);
  const double a = 0.8, b = -0.45;
  ConvSpec axial;
  axial.kernel = 2;
  axial.stride = 2;
  axial.padding = Padding::valid;
  Tensor w1({2, 1, 1}, 2, {a, b});
  Tensor bias({1}, 0);

  ConvSpec full;
  full.kernel = 2;
  full.stride = 2;
  full.padding = Padding::valid;
  full.spatial_arity = 2;
  const double m = (a + b) / 2.0;
  Tensor w2({2, 2, 1, 1}, 3, {a, m, m, b});

  for (auto shape : {std::vector<std::size_t>{2, 2, 1}, {4, 6, 1}, {8, 8, 1}}) {
    Tensor x = random_tensor(shape, 2, rng);
    Tensor lhs = axial_conv(x, w1, bias, axial, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
    Tensor rhs = conv_lastaxes(x, w2, bias, full);
    REQUIRE(lhs.shape() == rhs.shape());
    for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(std::abs(lhs[i] - rhs[i]) <= 1e-12);
  }
}

TEST_CASE("rank-3 Linear form matches a literal transcription of the flow") {
  CounterRng rng(7);
  const std::size_t n = 4, c = 2;
  Tensor x = random_tensor({n, n, n, c}, 3, rng);
  const std::size_t out_len = 2, out_c = 3;
  Tensor w = random_tensor({n * c, out_len * out_c}, 1, rng);
  Tensor b = random_tensor({out_len * out_c}, 0, rng);

  // y = sum_i P_i^-1( Pool_{1,2}( Linear_3( P_i(x) ) ) ), cyclic P_i.
  Tensor expect;
  bool first = true;
  for (const auto& p : cyclic_rotations(3)) {
    Tensor u = permute(x, p);
    Tensor v = linear_lastaxis(u, w, b, out_len, out_c);
    v = adaptive_pool(v, {0, 1}, {out_len, out_len}, PoolMode::avg);
    Tensor branch = permute(v, p.inverse());
    expect = first ? branch : add(expect, branch);
    first = false;
  }
  Tensor got = axial_linear(x, w, b, out_len, out_c, Aggregation::sum, PermSet::cyclic,
                            PoolMode::avg);
  CHECK(checks::bit_equal(got, expect));
}

TEST_CASE("identity inner map turns the Linear form into K copies of x") {
  // With an identity weight, no bias, and pool targets equal to the input
  // size, every branch re-inverts to x itself, so the sum is K * x.
  CounterRng rng(11);
  const std::size_t n = 3;
  Tensor x = random_tensor({n, n, 1}, 2, rng);
  Tensor w({n, n}, 1);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  Tensor b({n}, 0);
  Tensor y = axial_linear(x, w, b, n, 1, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == 2.0 * x[i]);
}

TEST_CASE("rank-1 Linear form is a plain linear layer") {
  CounterRng rng(13);
  Tensor x = random_tensor({4, 2}, 1, rng);
  Tensor w = random_tensor({8, 6}, 1, rng);
  Tensor b = random_tensor({6}, 0, rng);
  Tensor y = axial_linear(x, w, b, 3, 2, Aggregation::sum);
  CHECK(checks::bit_equal(y, linear_lastaxis(x, w, b, 3, 2)));
}

TEST_CASE("non-cubic inputs are rejected by the Linear form") {
  CounterRng rng(17);
  Tensor x = random_tensor({3, 4, 1}, 2, rng);
  Tensor w = random_tensor({3, 3}, 1, rng);
  Tensor b = random_tensor({3}, 0, rng);
  CHECK_THROWS_AS(axial_linear(x, w, b, 3, 1), Error);
}

TEST_CASE("zero query/key axial attention sums per-axis mean filters") {
  CounterRng rng(19);
  Tensor x = random_tensor({3, 4, 2}, 2, rng);
  Tensor zero({2, 2}, 1);
  Tensor eye({2, 2}, 1);
  eye[0] = eye[3] = 1.0;
  Tensor y = axial_attention(x, zero, zero, eye, eye, 1, Aggregation::sum, PermSet::cyclic);

  // Mean along axis 0 plus mean along axis 1, broadcast back.
  Tensor expect(x.shape(), 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        double m0 = 0.0, m1 = 0.0;
        for (std::size_t t = 0; t < 3; ++t) m0 += x[(t * 4 + j) * 2 + c];
        for (std::size_t t = 0; t < 4; ++t) m1 += x[(i * 4 + t) * 2 + c];
        expect[(i * 4 + j) * 2 + c] = m0 / 3.0 + m1 / 4.0;
      }
  CHECK(checks::rel_residual(y, expect) <= 1e-12);
}

TEST_CASE("cyclic branch set agrees with the full factorial set at K=3") {
  CounterRng rng(23);
  ConvSpec spec;
  spec.kernel = 2;
  spec.stride = 2;
  spec.padding = Padding::valid;
  spec.in_channels = 2;
  spec.out_channels = 2;
  Tensor x = random_tensor({4, 4, 6, 2}, 3, rng);
  Tensor w = random_tensor(conv_weight_shape(spec), 2, rng);
  Tensor b = random_tensor({2}, 0, rng);

  // sum: the factorial set repeats each cyclic branch (K-1)! times.
  Tensor cyc = axial_conv(x, w, b, spec, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
  Tensor full = axial_conv(x, w, b, spec, Aggregation::sum, PermSet::all_factorial, PoolMode::avg);
  CHECK(checks::rel_residual(full, scale(cyc, 2.0)) <= checks::kEquivRelTol);

  // mean and max: identical results.
  for (auto agg : {Aggregation::mean, Aggregation::max}) {
    const PoolMode pool = agg == Aggregation::max ? PoolMode::max : PoolMode::avg;
    Tensor c2 = axial_conv(x, w, b, spec, agg, PermSet::cyclic, pool);
    Tensor f2 = axial_conv(x, w, b, spec, agg, PermSet::all_factorial, pool);
    CHECK(checks::rel_residual(f2, c2) <= checks::kEquivRelTol);
  }

  // Linear form with pooling, cubic input.
  Tensor xc = random_tensor({4, 4, 4, 1}, 3, rng);
  Tensor lw = random_tensor({4, 2}, 1, rng);
  Tensor lb = random_tensor({2}, 0, rng);
  Tensor lc = axial_linear(xc, lw, lb, 2, 1, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
  Tensor lf = axial_linear(xc, lw, lb, 2, 1, Aggregation::sum, PermSet::all_factorial,
                           PoolMode::avg);
  CHECK(checks::rel_residual(lf, scale(lc, 2.0)) <= checks::kEquivRelTol);
}

TEST_CASE("equivariance sweep at small scale") {
  for (int rank = 1; rank <= 3; ++rank) {
    auto res = checks::sxnn_equivariance_sweep(rank, 2, 1234);
    INFO("rank ", rank, " residual ", res.max_residual);
    CHECK(res.max_residual <= checks::kEquivRelTol);
    CHECK_FALSE(res.exact_violation);
  }
}

TEST_CASE("Linear form upsamples the pooled axes when the target grows") {
  CounterRng rng(31);
  Tensor x = random_tensor({2, 2, 1}, 2, rng);
  Tensor w = random_tensor({2, 4}, 1, rng);  // last axis 2 -> 4
  Tensor b = random_tensor({4}, 0, rng);
  Tensor y = axial_linear(x, w, b, 4, 1, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
  CHECK(y.shape() == std::vector<std::size_t>{4, 4, 1});
  // Equivariance survives the repeat-based resize.
  for (const auto& p : all_permutations(2)) {
    Tensor y2 = axial_linear(permute(x, p), w, b, 4, 1, Aggregation::sum, PermSet::cyclic,
                             PoolMode::avg);
    CHECK(checks::rel_residual(y2, permute(y, p)) <= checks::kEquivRelTol);
  }
  // Non-integer growth has no repeat factor.
  Tensor w3 = random_tensor({2, 3}, 1, rng);
  Tensor b3 = random_tensor({3}, 0, rng);
  CHECK_THROWS_AS(axial_linear(x, w3, b3, 3, 1, Aggregation::sum, PermSet::cyclic,
                               PoolMode::avg),
                  Error);
}

TEST_CASE("mean aggregation divides after a fixed-order summation") {
  CounterRng rng(29);
  ConvSpec spec;
  spec.kernel = 3;
  spec.stride = 1;
  spec.padding = Padding::same;
  spec.in_channels = 1;
  spec.out_channels = 1;
  Tensor x = random_tensor({3, 3, 1}, 2, rng);
  Tensor w = random_tensor(conv_weight_shape(spec), 2, rng);
  Tensor b = random_tensor({1}, 0, rng);
  Tensor s = axial_conv(x, w, b, spec, Aggregation::sum, PermSet::cyclic, PoolMode::avg);
  Tensor m = axial_conv(x, w, b, spec, Aggregation::mean, PermSet::cyclic, PoolMode::avg);
  CHECK(checks::bit_equal(m, scale(s, 0.5)));
}

TEST_SUITE_END();
