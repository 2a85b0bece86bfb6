// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "micformer/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace micformer {
namespace {

LabelMap random_map(Rng& rng, Extents e, std::size_t classes, double fill = 1.0) {
  LabelMap l(e);
  for (auto& c : l.data) c = rng.uniform() < fill ? static_cast<std::uint8_t>(rng.below(classes)) : 0;
  return l;
}

/// Random blobs: a few axis-aligned boxes per class, so surfaces are non-trivial.
LabelMap blob_map(Rng& rng, Extents e, std::size_t classes) {
  LabelMap l(e);
  for (std::size_t c = 1; c < classes; ++c)
    for (int b = 0; b < 2; ++b) {
      std::array<std::size_t, 3> lo, hi;
      for (int a = 0; a < 3; ++a) {
        lo[a] = rng.below(e[a]);
        hi[a] = std::min(e[a], lo[a] + 1 + rng.below(e[a] / 2 + 1));
      }
      for (std::size_t z = lo[0]; z < hi[0]; ++z)
        for (std::size_t y = lo[1]; y < hi[1]; ++y)
          for (std::size_t x = lo[2]; x < hi[2]; ++x) l.at(z, y, x) = static_cast<std::uint8_t>(c);
    }
  return l;
}

TEST(Dice, Examples) {
  LabelMap a({1, 1, 4}), b({1, 1, 4});
  a.data = {1, 1, 0, 0};
  EXPECT_EQ(dice(a, a, 1), 1.0);
  b.data = {0, 0, 1, 1};
  EXPECT_EQ(dice(a, b, 1), 0.0);
  b.data = {1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(dice(a, b, 1), 2.0 / 3.0);
  EXPECT_EQ(dice(a, b, 5), 1.0);
  b.data = {0, 0, 0, 0};
  EXPECT_EQ(dice(a, b, 1), 0.0);
  EXPECT_THROW(dice(a, LabelMap({1, 2, 2}), 1), ShapeError);
}

TEST(Miou, Examples) {
  LabelMap a({1, 1, 3}), b({1, 1, 3});
  a.data = {1, 1, 0};
  EXPECT_EQ(miou(a, a, 2), 1.0);
  b.data = {1, 0, 0};
  EXPECT_EQ(miou(a, b, 2), 0.5);
  EXPECT_THROW(miou(a, LabelMap({3, 1, 1}), 2), ShapeError);
}

TEST(Hd95, Examples) {
  LabelMap a({1, 1, 8}), b({1, 1, 8});
  a.data[1] = 1;
  b.data[4] = 1;
  EXPECT_EQ(hd95(a, a, 1, {1, 1, 1}), 0.0);
  EXPECT_EQ(hd95(a, b, 1, {1, 1, 1}), 3.0);
  EXPECT_EQ(hd95(a, b, 1, {0.5f, 1, 1}), 1.5);
  EXPECT_EQ(hd95(a, b, 2, {1, 1, 1}), 0.0);
  LabelMap empty({1, 1, 8});
  EXPECT_DOUBLE_EQ(hd95(a, empty, 1, {1, 2, 3}), std::sqrt(64.0 + 4.0 + 9.0));
}

TEST(Metrics, OracleEquivalenceRandom8) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Extents e{8, 8, 8};
    LabelMap p = trial % 2 ? random_map(rng, e, 4, 0.6) : blob_map(rng, e, 4);
    LabelMap g = trial % 3 ? blob_map(rng, e, 4) : random_map(rng, e, 4, 0.3);
    const std::array<float, 3> sp{1.0f + float(rng.below(3)) * 0.5f, 1.0f, 0.75f};
    double oracle_miou = 0;
    for (std::uint8_t c = 0; c < 4; ++c) {
      EXPECT_EQ(dice(p, g, c), oracle::dice(p.data, g.data, c));
      EXPECT_EQ(iou(p, g, c), oracle::iou(p.data, g.data, c));
      if (c) oracle_miou += oracle::iou(p.data, g.data, c) / 3.0;
      EXPECT_NEAR(hd95(p, g, c, sp), oracle::hd95(p.data, g.data, c, 8, 8, 8, {sp[0], sp[1], sp[2]}), 1e-9);
    }
    EXPECT_NEAR(miou(p, g, 4), oracle_miou, 1e-15);
  }
}

TEST(Metrics, HdOracleRandom12Anisotropic) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Extents e{12, 10, 12};
    LabelMap p = blob_map(rng, e, 3), g = blob_map(rng, e, 3);
    const std::array<float, 3> sp{0.8f, 1.3f, 2.1f};
    for (std::uint8_t c = 1; c < 3; ++c) {
      EXPECT_NEAR(hd95(p, g, c, sp), oracle::hd95(p.data, g.data, c, 12, 10, 12, {sp[0], sp[1], sp[2]}), 1e-9);
    }
  }
}

TEST(Metrics, Symmetry) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    LabelMap a = blob_map(rng, {6, 7, 8}, 3), b = random_map(rng, {6, 7, 8}, 3, 0.5);
    for (std::uint8_t c = 0; c < 3; ++c) {
      EXPECT_EQ(dice(a, b, c), dice(b, a, c));
      EXPECT_EQ(iou(a, b, c), iou(b, a, c));
      EXPECT_EQ(hd95(a, b, c, {1, 2, 1}), hd95(b, a, c, {1, 2, 1}));
    }
  }
}

TEST(Metrics, FlippingAnOverlapVoxelNeverRaisesDice) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    LabelMap g = blob_map(rng, {8, 8, 8}, 3), p = g;
    for (std::size_t i = 0; i < p.data.size(); ++i)
      if (rng.uniform() < 0.1) p.data[i] = static_cast<std::uint8_t>(rng.below(3));
    for (std::uint8_t c = 1; c < 3; ++c) {
      std::vector<std::size_t> overlap;
      for (std::size_t i = 0; i < p.data.size(); ++i)
        if (p.data[i] == c && g.data[i] == c) overlap.push_back(i);
      if (overlap.empty()) continue;
      LabelMap q = p;
      q.data[overlap[rng.below(overlap.size())]] = 0;
      EXPECT_LE(dice(q, g, c), dice(p, g, c));
    }
  }
}

TEST(Report, IdenticalMapsAndIdentity) {
  Rng rng(5);
  LabelMap g = blob_map(rng, {10, 10, 10}, 5);
  g.spacing = {1.5f, 1.5f, 2.0f};
  MetricsReport same = report(g, g, 5);
  EXPECT_EQ(same.mean_dice, 1.0);
  EXPECT_EQ(same.miou, 1.0);
  EXPECT_EQ(same.mean_hd95, 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    LabelMap p = random_map(rng, g.extents, 5, 0.4);
    MetricsReport r = report(p, g, 5);
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_LE(r.iou[c], r.dice[c]);
      EXPECT_GE(r.dice[c], 0.0);
      EXPECT_LE(r.dice[c], 1.0);
      EXPECT_GE(r.hd95[c], 0.0);
      EXPECT_NEAR(r.dice[c], 2 * r.iou[c] / (1 + r.iou[c]), 1e-12);
      EXPECT_EQ(r.pred_voxels[c], static_cast<std::uint64_t>(std::count(p.data.begin(), p.data.end(), c)));
    }
    EXPECT_EQ(r.hd95[2], hd95(p, g, 2, g.spacing));
  }
}

TEST(Report, SerializationAndAggregate) {
  Rng rng(6);
  LabelMap g = blob_map(rng, {6, 6, 6}, 3), p = random_map(rng, {6, 6, 6}, 3);
  MetricsReport r = report(p, g, 3);
  const std::string text = to_text(r);
  EXPECT_NE(text.find("dice.1 = "), std::string::npos);
  EXPECT_NE(text.find("hd95.mean = "), std::string::npos);
  auto j = to_json(r);
  EXPECT_EQ(j["mean"]["dice"].get<double>(), r.mean_dice);
  EXPECT_EQ(j["dice"].size(), 3u);

  MetricsReport a = aggregate({r, report(g, g, 3)});
  EXPECT_DOUBLE_EQ(a.mean_dice, (r.mean_dice + 1.0) / 2);
  EXPECT_THROW(aggregate({}), ConfigError);
  EXPECT_THROW(report(p, g, 1), ConfigError);
}

}  // namespace
}  // namespace micformer
