// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "micformer/io.hpp"

namespace micformer {

struct MetricsReport {
  std::size_t classes = 0;
  std::vector<double> dice;  // indexed by class; entry 0 is background
  std::vector<double> iou;
  std::vector<double> hd95;  // mm
  std::vector<std::uint64_t> pred_voxels;
  std::vector<std::uint64_t> gt_voxels;
  double mean_dice = 0;  // over foreground classes
  double miou = 0;
  double mean_hd95 = 0;
};

namespace detail {

inline void check_same_extents(const LabelMap& a, const LabelMap& b) {
  if (a.extents != b.extents) {
    throw ShapeError("label maps differ in extents: [" + std::to_string(a.extents[0]) + "," + std::to_string(a.extents[1]) +
                     "," + std::to_string(a.extents[2]) + "] vs [" + std::to_string(b.extents[0]) + "," +
                     std::to_string(b.extents[1]) + "," + std::to_string(b.extents[2]) + "]");
  }
}

struct OverlapCounts {
  std::uint64_t pred = 0, gt = 0, both = 0;
};

inline OverlapCounts count_overlap(const LabelMap& pred, const LabelMap& gt, std::uint8_t c) {
  OverlapCounts k;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] == c, g = gt.data[i] == c;
    k.pred += p;
    k.gt += g;
    k.both += p && g;
  }
  return k;
}

inline double dice_from(const OverlapCounts& k) {
  if (k.pred + k.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(k.both) / static_cast<double>(k.pred + k.gt);
}

inline double iou_from(const OverlapCounts& k) {
  const std::uint64_t uni = k.pred + k.gt - k.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(k.both) / static_cast<double>(uni);
}

/// Mask voxels with at least one face neighbour outside the mask (the volume exterior counts as outside).
inline std::vector<std::uint8_t> surface(const std::vector<std::uint8_t>& mask, const Extents& e) {
  std::vector<std::uint8_t> s(mask.size(), 0);
  const std::size_t D = e[0], H = e[1], W = e[2];
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = (z * H + y) * W + x;
        if (!mask[i]) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z + 1 == D || y + 1 == H || x + 1 == W;
        s[i] = edge || !mask[i - H * W] || !mask[i + H * W] || !mask[i - W] || !mask[i + W] || !mask[i - 1] ||
               !mask[i + 1];
      }
  return s;
}

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher), samples `step` apart.
inline void edt_1d(const double* f, double* d, std::size_t n, double step, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  // Skip leading infinite samples; an all-infinite line stays infinite.
  std::size_t first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  auto pos = [step](std::size_t q) { return static_cast<double>(q) * step; };
  auto intersect = [&](std::size_t q, std::size_t p) {
    return ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
  };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s = intersect(q, v[k]);
    while (s <= z[k]) {  // z[0] = -inf terminates this
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < pos(q)) ++k;
    const double dq = pos(q) - pos(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest set voxel.
/// spacing is (x, y, z).
inline std::vector<double> squared_distance_to(const std::vector<std::uint8_t>& set, const Extents& e,
                                               const std::array<float, 3>& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t D = e[0], H = e[1], W = e[2];
  std::vector<double> g(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) g[i] = set[i] ? 0.0 : inf;
  std::vector<double> line, out;
  std::vector<std::size_t> v;
  std::vector<double> z;
  const std::size_t ext[3] = {D, H, W};
  const std::size_t stride[3] = {H * W, W, 1};
  const double step[3] = {spacing[2], spacing[1], spacing[0]};
  for (int axis = 2; axis >= 0; --axis) {
    const std::size_t n = ext[axis];
    line.resize(n);
    out.resize(n);
    for (std::size_t base = 0; base < g.size(); ++base) {
      // Visit each line once, from its first element.
      if ((base / stride[axis]) % n != 0) continue;
      for (std::size_t q = 0; q < n; ++q) line[q] = g[base + q * stride[axis]];
      edt_1d(line.data(), out.data(), n, step[axis], v, z);
      for (std::size_t q = 0; q < n; ++q) g[base + q * stride[axis]] = out[q];
    }
  }
  return g;
}

/// Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest value.
inline double percentile95(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t rank = (95 * values.size() + 99) / 100;
  std::nth_element(values.begin(), values.begin() + static_cast<long>(rank - 1), values.end());
  return values[rank - 1];
}

}  // namespace detail

/// 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
inline double dice(const LabelMap& pred, const LabelMap& gt, std::uint8_t c) {
  detail::check_same_extents(pred, gt);
  return detail::dice_from(detail::count_overlap(pred, gt, c));
}

inline double iou(const LabelMap& pred, const LabelMap& gt, std::uint8_t c) {
  detail::check_same_extents(pred, gt);
  return detail::iou_from(detail::count_overlap(pred, gt, c));
}

/// Mean IoU over foreground classes 1..classes-1.
inline double miou(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  detail::check_same_extents(pred, gt);
  if (classes < 2) throw ConfigError("miou needs at least one foreground class");
  double s = 0;
  for (std::size_t c = 1; c < classes; ++c) s += iou(pred, gt, static_cast<std::uint8_t>(c));
  return s / static_cast<double>(classes - 1);
}

/// Length of the volume diagonal in mm; the HD95 value when exactly one mask is empty.
inline double diagonal_mm(const Extents& e, const std::array<float, 3>& spacing) {
  const double x = e[2] * spacing[0], y = e[1] * spacing[1], z = e[0] * spacing[2];
  return std::sqrt(x * x + y * y + z * z);
}

/// Symmetric 95th-percentile surface distance in mm (spacing along x, y, z).
inline double hd95(const LabelMap& pred, const LabelMap& gt, std::uint8_t c, const std::array<float, 3>& spacing) {
  detail::check_same_extents(pred, gt);
  std::vector<std::uint8_t> mp(pred.data.size()), mg(gt.data.size());
  bool any_p = false, any_g = false;
  for (std::size_t i = 0; i < mp.size(); ++i) {
    mp[i] = pred.data[i] == c;
    mg[i] = gt.data[i] == c;
    any_p |= mp[i] != 0;
    any_g |= mg[i] != 0;
  }
  if (!any_p && !any_g) return 0.0;
  if (any_p != any_g) return diagonal_mm(pred.extents, spacing);
  const auto sp = detail::surface(mp, pred.extents);
  const auto sg = detail::surface(mg, gt.extents);
  const auto to_g = detail::squared_distance_to(sg, gt.extents, spacing);
  const auto to_p = detail::squared_distance_to(sp, pred.extents, spacing);
  std::vector<double> dp, dg;
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i]) dp.push_back(std::sqrt(to_g[i]));
    if (sg[i]) dg.push_back(std::sqrt(to_p[i]));
  }
  return std::max(detail::percentile95(std::move(dp)), detail::percentile95(std::move(dg)));
}

inline MetricsReport report(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  detail::check_same_extents(pred, gt);
  if (classes < 2) throw ConfigError("a report needs at least one foreground class");
  MetricsReport r;
  r.classes = classes;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto k = detail::count_overlap(pred, gt, static_cast<std::uint8_t>(c));
    r.dice.push_back(detail::dice_from(k));
    r.iou.push_back(detail::iou_from(k));
    r.pred_voxels.push_back(k.pred);
    r.gt_voxels.push_back(k.gt);
    r.hd95.push_back(c == 0 ? 0.0 : hd95(pred, gt, static_cast<std::uint8_t>(c), gt.spacing));
  }
  const double nf = static_cast<double>(classes - 1);
  for (std::size_t c = 1; c < classes; ++c) {
    r.mean_dice += r.dice[c] / nf;
    r.miou += r.iou[c] / nf;
    r.mean_hd95 += r.hd95[c] / nf;
  }
  return r;
}

/// Per-case reports averaged entry by entry.
inline MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ConfigError("cannot aggregate zero reports");
  MetricsReport a;
  a.classes = reports[0].classes;
  a.dice.assign(a.classes, 0);
  a.iou.assign(a.classes, 0);
  a.hd95.assign(a.classes, 0);
  a.pred_voxels.assign(a.classes, 0);
  a.gt_voxels.assign(a.classes, 0);
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    if (r.classes != a.classes) throw ConfigError("cannot aggregate reports with different class counts");
    for (std::size_t c = 0; c < a.classes; ++c) {
      a.dice[c] += r.dice[c];
      a.iou[c] += r.iou[c];
      a.hd95[c] += r.hd95[c];
      a.pred_voxels[c] += r.pred_voxels[c];
      a.gt_voxels[c] += r.gt_voxels[c];
    }
    a.mean_dice += r.mean_dice;
    a.miou += r.miou;
    a.mean_hd95 += r.mean_hd95;
  }
  for (std::size_t c = 0; c < a.classes; ++c) {
    a.dice[c] /= n;
    a.iou[c] /= n;
    a.hd95[c] /= n;
  }
  a.mean_dice /= n;
  a.miou /= n;
  a.mean_hd95 /= n;
  return a;
}

/// One `metric.class = value` line per entry, then the means.
inline std::string to_text(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t c = 0; c < r.classes; ++c) {
    os << "dice." << c << " = " << r.dice[c] << '\n';
    os << "iou." << c << " = " << r.iou[c] << '\n';
    os << "hd95." << c << " = " << r.hd95[c] << '\n';
    os << "voxels_pred." << c << " = " << r.pred_voxels[c] << '\n';
    os << "voxels_gt." << c << " = " << r.gt_voxels[c] << '\n';
  }
  os << "dice.mean = " << r.mean_dice << '\n';
  os << "miou.mean = " << r.miou << '\n';
  os << "hd95.mean = " << r.mean_hd95 << '\n';
  return os.str();
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["classes"] = r.classes;
  j["dice"] = r.dice;
  j["iou"] = r.iou;
  j["hd95"] = r.hd95;
  j["voxels_pred"] = r.pred_voxels;
  j["voxels_gt"] = r.gt_voxels;
  j["mean"] = {{"dice", r.mean_dice}, {"miou", r.miou}, {"hd95", r.mean_hd95}};
  return j;
}

}  // namespace micformer
