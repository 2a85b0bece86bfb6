// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "micformer/nn_ops.hpp"
#include "test_util.hpp"

namespace micformer {
namespace {

using test::randn;

Tensor<double> eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor<double>({n, n}, d);
}

TEST(Linear, IdentityZeroAndOracle) {
  Rng rng(1);
  Tensor<double> x = randn(rng, {2, 3, 4});
  EXPECT_TRUE(linear(x, eye(4), std::optional<Tensor<double>>(Tensor<double>::zeros({4}))).same_values(x));
  Tensor<double> b = randn(rng, {5});
  Tensor<double> w = randn(rng, {4, 5});
  Tensor<double> z = linear(Tensor<double>::zeros({3, 4}), w, std::optional<Tensor<double>>(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(z[i * 5 + j], b[j]);
  Tensor<double> y = linear(x, w, std::optional<Tensor<double>>(b));
  Tensor<double> ref = add(matmul(reshape(x, {6, 4}), w), b);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  EXPECT_THROW(linear(x, randn(rng, {3, 5})), ShapeError);
}

TEST(LayerNorm, HandCasesAndScalarLoop) {
  Tensor<double> ones = Tensor<double>::full({4}, 1.0), zeros = Tensor<double>::zeros({4});
  const Tensor<double> flat = layer_norm(Tensor<double>::full({2, 4}, 3.0), ones, zeros);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  Tensor<double> r = layer_norm(Tensor<double>({2}, {1, -1}), Tensor<double>::full({2}, 1.0),
                                Tensor<double>::zeros({2}), 1e-15);
  EXPECT_NEAR(r[0], 1.0, 1e-12);
  EXPECT_NEAR(r[1], -1.0, 1e-12);

  Rng rng(2);
  const std::size_t C = 6;
  Tensor<double> x = randn(rng, {5, C}, 3.0), g = randn(rng, {C}), b = randn(rng, {C});
  Tensor<double> y = layer_norm(x, g, b, 1e-5);
  for (std::size_t i = 0; i < 5; ++i) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < C; ++c) mu += x[i * C + c];
    mu /= C;
    for (std::size_t c = 0; c < C; ++c) var += (x[i * C + c] - mu) * (x[i * C + c] - mu);
    var /= C;
    for (std::size_t c = 0; c < C; ++c) {
      EXPECT_NEAR(y[i * C + c], (x[i * C + c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c], 1e-6);
    }
  }
  EXPECT_THROW(layer_norm(x, randn(rng, {C + 1}), b), ShapeError);
}

TEST(DepthwiseSeparableConv, DeltaKernelIsIdentity) {
  Rng rng(3);
  TokenGrid<double> x(randn(rng, {3, 4, 2, 3}));
  std::vector<double> delta(27 * 3, 0.0);
  for (std::size_t c = 0; c < 3; ++c) delta[13 * 3 + c] = 1.0;
  ConvKernel3D<double> k{Tensor<double>({3, 3, 3, 3}, delta), eye(3), std::nullopt};
  EXPECT_TRUE(depthwise_separable_conv3d(x, k).tensor.same_values(x.tensor));
}

TEST(DepthwiseSeparableConv, ZeroWeightsGiveBias) {
  Rng rng(4);
  TokenGrid<double> x(randn(rng, {2, 2, 2, 2}));
  Tensor<double> bias({3}, {1, 2, 3});
  ConvKernel3D<double> k{Tensor<double>::zeros({3, 3, 3, 2}), Tensor<double>::zeros({2, 3}), bias};
  Tensor<double> y = depthwise_separable_conv3d(x, k).tensor;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y[i * 3 + c], bias[c]);
}

TEST(DepthwiseSeparableConv, MatchesNaiveLoops) {
  Rng rng(5);
  const std::size_t E = 6, C = 4, O = 3;
  Tensor<double> x = randn(rng, {E, E, E, C}), dw = randn(rng, {3, 3, 3, C}), pw = randn(rng, {C, O}),
                 b = randn(rng, {O});
  Tensor<double> y = depthwise_separable_conv3d(TokenGrid<double>(x), ConvKernel3D<double>{dw, pw, b}).tensor;
  auto at = [&](long z, long yy, long xx, std::size_t c) {
    if (z < 0 || yy < 0 || xx < 0 || z >= long(E) || yy >= long(E) || xx >= long(E)) return 0.0;
    return x[((z * E + yy) * E + xx) * C + c];
  };
  for (long z = 0; z < long(E); ++z)
    for (long yy = 0; yy < long(E); ++yy)
      for (long xx = 0; xx < long(E); ++xx) {
        std::vector<double> mid(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
          for (long kz = 0; kz < 3; ++kz)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx)
                mid[c] += dw[((kz * 3 + ky) * 3 + kx) * C + c] * at(z + kz - 1, yy + ky - 1, xx + kx - 1, c);
        for (std::size_t o = 0; o < O; ++o) {
          double s = b[o];
          for (std::size_t c = 0; c < C; ++c) s += mid[c] * pw[c * O + o];
          EXPECT_NEAR(y[((z * E + yy) * E + xx) * O + o], s, 1e-10);
        }
      }
}

TEST(DepthwiseSeparableConv, Errors) {
  TokenGrid<double> x(Tensor<double>::zeros({2, 2, 2, 2}));
  EXPECT_THROW(depthwise_conv3d(x, Tensor<double>::zeros({2, 2, 2, 2})), ShapeError);
  EXPECT_THROW(depthwise_conv3d(x, Tensor<double>::zeros({3, 3, 3, 3})), ShapeError);
}

TEST(TrilinearSample, HandCases) {
  // 1 x 1 x 2 grid along x: values 0 and 1, then 4 and 8.
  TokenGrid<double> g(Tensor<double>({1, 1, 2, 1}, {0.0, 1.0}));
  EXPECT_DOUBLE_EQ(trilinear_sample(g, Tensor<double>({1, 1, 1, 3}, {0.5, 0, 0})).tensor.item(), 0.5);
  TokenGrid<double> g2(Tensor<double>({1, 1, 2, 1}, {4.0, 8.0}));
  EXPECT_DOUBLE_EQ(trilinear_sample(g2, Tensor<double>({1, 1, 1, 3}, {0.25, 0, 0})).tensor.item(), 5.0);
  EXPECT_DOUBLE_EQ(trilinear_sample(g2, Tensor<double>({1, 1, 1, 3}, {-3.0, 0, 0})).tensor.item(), 4.0);
  EXPECT_DOUBLE_EQ(trilinear_sample(g2, Tensor<double>({1, 1, 1, 3}, {7.0, 0, 0})).tensor.item(), 8.0);
  EXPECT_THROW(trilinear_sample(g2, Tensor<double>({1, 1, 1, 3}, {NAN, 0, 0})), DomainError);
}

TEST(TrilinearSample, IdentityLatticeIsIdentity) {
  Rng rng(6);
  const std::size_t D = 3, H = 4, W = 5;
  TokenGrid<float> x(test::randn_f(rng, {D, H, W, 2}, 1.0));
  std::vector<float> c;
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        c.push_back(float(xx));
        c.push_back(float(y));
        c.push_back(float(z));
      }
  Tensor<float> out = trilinear_sample(x, Tensor<float>({D, H, W, 3}, c)).tensor;
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], x.tensor[i], 1e-6f);
}

TEST(TrilinearSample, ConvexInterpolation) {
  Rng rng(7);
  const std::size_t E = 4;
  TokenGrid<double> x(randn(rng, {E, E, E, 1}));
  for (int t = 0; t < 200; ++t) {
    const double px = rng.uniform(0, E - 1), py = rng.uniform(0, E - 1), pz = rng.uniform(0, E - 1);
    const double v = trilinear_sample(x, Tensor<double>({1, 1, 1, 3}, {px, py, pz})).tensor.item();
    double lo = 1e300, hi = -1e300;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const std::size_t zi = std::min<std::size_t>(std::size_t(pz) + dz, E - 1);
          const std::size_t yi = std::min<std::size_t>(std::size_t(py) + dy, E - 1);
          const std::size_t xi = std::min<std::size_t>(std::size_t(px) + dx, E - 1);
          const double n = x.tensor[(zi * E + yi) * E + xi];
          lo = std::min(lo, n);
          hi = std::max(hi, n);
        }
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
}

TEST(PatchEmbed, ShapeAndConstantVolume) {
  Rng rng(8);
  Tensor<double> w = randn(rng, {64, 24}), b = randn(rng, {24});
  TokenGrid<double> t = patch_embed(Tensor<double>::full({32, 32, 32}, 0.7), 4, w, std::optional<Tensor<double>>(b));
  EXPECT_EQ(t.tensor.shape(), (Shape{8, 8, 8, 24}));
  for (std::size_t i = 0; i < t.tokens(); ++i)
    for (std::size_t c = 0; c < 24; ++c) EXPECT_EQ(t.tensor[i * 24 + c], t.tensor[c]);
  EXPECT_THROW(patch_embed(Tensor<double>::zeros({6, 8, 8}), 4, w, std::optional<Tensor<double>>(b)), ShapeError);
}

TEST(PatchEmbed, MatchesUnfoldThenLinear) {
  Rng rng(9);
  const std::size_t p = 2, D = 4, H = 2, W = 6, C = 3;
  Tensor<double> v = randn(rng, {D, H, W}), w = randn(rng, {p * p * p, C});
  Tensor<double> t = patch_embed(v, p, w, std::optional<Tensor<double>>{}).tensor;
  for (std::size_t z = 0; z < D / p; ++z)
    for (std::size_t y = 0; y < H / p; ++y)
      for (std::size_t x = 0; x < W / p; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0;
          std::size_t k = 0;
          for (std::size_t dz = 0; dz < p; ++dz)
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx, ++k)
                s += v[((z * p + dz) * H + y * p + dy) * W + x * p + dx] * w[k * C + c];
          EXPECT_NEAR(t[(((z * (H / p)) + y) * (W / p) + x) * C + c], s, 1e-12);
        }
}

TEST(PatchMergeExpand, ShapesAndLinearity) {
  Rng rng(10);
  TokenGrid<double> x(randn(rng, {8, 8, 8, 24}));
  TokenGrid<double> m = patch_merge(x, randn(rng, {192, 48}));
  EXPECT_EQ(m.tensor.shape(), (Shape{4, 4, 4, 48}));
  TokenGrid<double> e = patch_expand(m, randn(rng, {48, 192}));
  EXPECT_EQ(e.tensor.shape(), (Shape{8, 8, 8, 24}));
  const TokenGrid<double> z = patch_expand(TokenGrid<double>(Tensor<double>::zeros({2, 2, 2, 4})), randn(rng, {4, 16}));
  for (double v : z.tensor.data()) EXPECT_EQ(v, 0.0);
  TokenGrid<double> c = patch_merge(TokenGrid<double>(Tensor<double>::full({2, 2, 2, 2}, 1.5)), randn(rng, {16, 4}));
  EXPECT_EQ(c.tensor.shape(), (Shape{1, 1, 1, 4}));
  EXPECT_THROW(patch_merge(TokenGrid<double>(Tensor<double>::zeros({3, 2, 2, 1})), randn(rng, {8, 2})), ShapeError);
  EXPECT_THROW(patch_expand(TokenGrid<double>(Tensor<double>::zeros({2, 2, 2, 3})), randn(rng, {3, 12})), ShapeError);
}

TEST(PatchMergeExpand, ExpandWithPermutationInvertsMerge) {
  // With the merge weight = I (8C -> 8C, abusing the 2C width) the expand weight = I recovers the lattice.
  Rng rng(11);
  const std::size_t C = 2;
  TokenGrid<double> x(randn(rng, {2, 4, 2, C}));
  Tensor<double> merged = gather(x.tensor, {1, 2, 1, 8 * C}, detail::block_gather_index(2, 4, 2, C, 2));
  TokenGrid<double> back = patch_expand_by(TokenGrid<double>(merged), eye(8 * C), 2);
  EXPECT_TRUE(back.tensor.same_values(x.tensor));
}

TEST(ShapeLaw, StageLattices) {
  Rng rng(12);
  const std::size_t E = 64, p = 4;
  TokenGrid<float> t = patch_embed(Tensor<float>::zeros({E, E, E}), p, test::randn_f(rng, {64, 4}, 1.0), std::optional<Tensor<float>>{});
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(t.depth(), E / (p << s));
    t = patch_merge(t, test::randn_f(rng, {8 * t.channels(), 2 * t.channels()}, 1.0));
  }
}

}  // namespace
}  // namespace micformer
