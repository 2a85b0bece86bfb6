// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "micformer/io.hpp"
#include "test_util.hpp"

namespace micformer {
namespace {

Volume random_volume(Rng& rng, Extents e) {
  Volume v(e, Modality::ct);
  for (auto& f : v.data) f = static_cast<float>(rng.normal() * 3.0);
  v.spacing = {0.5f, 1.25f, 2.0f};
  return v;
}

template <typename Fn>
void expect_format_error(Fn&& fn, const std::string& fragment) {
  try {
    fn();
    ADD_FAILURE() << "expected FormatError containing '" << fragment << "'";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

TEST(Mvol, VolumeRoundTripIsBitwise) {
  Rng rng(1);
  auto dir = test::scratch_dir("mvol");
  Volume v = random_volume(rng, {8, 8, 8});
  v.data[3] = -0.0f;
  v.data[4] = std::numeric_limits<float>::denorm_min();
  write_mvol(v, dir / "v.mvol");
  Volume back = read_volume(dir / "v.mvol", Modality::ct);
  ASSERT_EQ(back.extents, v.extents);
  EXPECT_EQ(back.spacing, v.spacing);
  EXPECT_EQ(std::memcmp(back.data.data(), v.data.data(), v.data.size() * 4), 0);
  EXPECT_EQ(encode_mvol(back), encode_mvol(v));
}

TEST(Mvol, LabelRoundTripAndKindChecks) {
  Rng rng(2);
  auto dir = test::scratch_dir("mvol_labels");
  LabelMap l({3, 5, 7});
  for (auto& c : l.data) c = static_cast<std::uint8_t>(rng.below(8));
  write_mvol(l, dir / "l.mvol");
  EXPECT_EQ(read_labels(dir / "l.mvol"), l);
  EXPECT_THROW(read_volume(dir / "l.mvol", Modality::mri), FormatError);
  write_mvol(random_volume(rng, {2, 2, 2}), dir / "v.mvol");
  EXPECT_THROW(read_labels(dir / "v.mvol"), FormatError);
}

TEST(Mvol, LayoutIsLittleEndianXFastest) {
  Volume v({1, 2, 3}, Modality::other);
  for (std::size_t i = 0; i < 6; ++i) v.data[i] = static_cast<float>(i);
  auto b = encode_mvol(v);
  ASSERT_EQ(b.size(), 31u + 6 * 4 + 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "MVOL");
  EXPECT_EQ(b[7], 3);   // x extent first
  EXPECT_EQ(b[11], 2);
  EXPECT_EQ(b[15], 1);
  EXPECT_EQ(detail::get_le<float>(b.data() + 31 + 4), 1.0f);
  EXPECT_EQ(v.at(0, 1, 2), 5.0f);
}

TEST(Mvol, Errors) {
  Rng rng(3);
  auto good = encode_mvol(random_volume(rng, {4, 4, 4}));

  auto magic = good;
  std::memcpy(magic.data(), "XXXX", 4);
  expect_format_error([&] { decode_mvol(magic); }, "bad magic");

  auto version = good;
  version[4] = 2;
  expect_format_error([&] { decode_mvol(version); }, "version");

  auto claim = detail::mvol_header(mvol::kKindIntensity, mvol::kDtypeF32, {10, 10, 10}, {1, 1, 1});
  for (int i = 0; i < 500; ++i) detail::put_le<float>(claim, 1.0f);
  detail::finish_crc(claim);
  expect_format_error([&] { decode_mvol(claim); }, "truncated");

  auto huge = detail::mvol_header(mvol::kKindIntensity, mvol::kDtypeF32, {1u << 20, 1u << 20, 1u << 20}, {1, 1, 1});
  detail::finish_crc(huge);
  expect_format_error([&] { decode_mvol(huge); }, "overflow");

  auto flipped = good;
  flipped[40] ^= 1;
  expect_format_error([&] { decode_mvol(flipped); }, "checksum");

  expect_format_error([&] { decode_mvol({}); }, "bad magic");
  EXPECT_THROW(read_mvol(test::scratch_dir("mvol_missing") / "none.mvol"), FormatError);
}

TEST(Normalize, Examples) {
  Volume c({2, 2, 2}, Modality::ct, 7.5f);
  for (float f : normalize_intensity(c).data) EXPECT_EQ(f, 0.0f);
  Volume two({1, 1, 2}, Modality::ct);
  two.data = {0.f, 2.f};
  EXPECT_EQ(normalize_intensity(two).data, (std::vector<float>{-1.f, 1.f}));
}

TEST(Normalize, RandomVolumeStatistics) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Volume v = random_volume(rng, {9, 6, 11});
    for (auto& f : v.data) f = f * 40.f + 300.f;
    Volume n = normalize_intensity(v);
    double mu = 0, sq = 0;
    for (float f : n.data) mu += f;
    mu /= n.data.size();
    for (float f : n.data) sq += (f - mu) * (f - mu);
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(std::sqrt(sq / n.data.size()), 1.0, 1e-5);
  }
}

TEST(Padding, Examples) {
  Volume v({60, 60, 60}, Modality::ct, 1.f);
  auto p = pad_to_divisible(v, 16);
  EXPECT_EQ(p.value.extents, (Extents{64, 64, 64}));
  EXPECT_EQ(p.before, (Extents{2, 2, 2}));
  EXPECT_EQ(p.value.at(0, 0, 0), 0.f);
  EXPECT_EQ(p.value.at(2, 2, 2), 1.f);

  Volume d({32, 16, 48}, Modality::ct, 2.f);
  auto same = pad_to_divisible(d, 16);
  EXPECT_EQ(same.value, d);
  EXPECT_THROW(pad_to_divisible(d, 0), ConfigError);
  EXPECT_THROW(pad_to_extents(d, {16, 16, 48}), ShapeError);
}

TEST(Padding, CropInvertsPad) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Extents e{1 + rng.below(13), 1 + rng.below(13), 1 + rng.below(13)};
    Volume v = random_volume(rng, e);
    auto p = pad_to_divisible(v, 1 + rng.below(8));
    for (int a = 0; a < 3; ++a) EXPECT_EQ(p.value.extents[a] % 1, 0u);
    EXPECT_EQ(crop(p.value, p.before, p.original), v);

    LabelMap l(e);
    for (auto& c : l.data) c = static_cast<std::uint8_t>(1 + rng.below(5));
    auto pl = pad_to_extents(l, {16, 16, 16});
    std::size_t background = 0;
    for (auto c : pl.value.data) background += c == 0;
    EXPECT_EQ(background, 16u * 16u * 16u - l.data.size());
    EXPECT_EQ(crop(pl.value, pl.before, pl.original), l);
  }
}

TEST(Synth, DeterministicAndComplete) {
  CasePair a = synth_case(7, 64, 4), b = synth_case(7, 64, 4);
  EXPECT_EQ(a.ct, b.ct);
  EXPECT_EQ(a.mri, b.mri);
  EXPECT_EQ(a.labels, b.labels);
  std::set<int> present(a.labels.data.begin(), a.labels.data.end());
  EXPECT_EQ(present, (std::set<int>{0, 1, 2, 3}));
  EXPECT_EQ(a.ct.extents, a.labels.extents);
  EXPECT_EQ(a.mri.extents, a.labels.extents);
  for (float f : a.ct.data) ASSERT_TRUE(std::isfinite(f));
  for (float f : a.mri.data) ASSERT_TRUE(std::isfinite(f));
}

TEST(Synth, Preconditions) {
  EXPECT_THROW(synth_case(1, 31, 8), ConfigError);
  EXPECT_THROW(synth_case(1, 32, 2), ConfigError);
}

TEST(Synth, DistinctSeedsGiveDistinctPlacements) {
  std::set<std::vector<std::uint8_t>> seen;
  for (std::uint64_t s = 0; s < 20; ++s) EXPECT_TRUE(seen.insert(synth_case(s, 32, 8).labels.data).second) << s;
}

/// Majority-class accuracy of a histogram classifier fit on even voxels and scored on odd ones,
/// restricted to foreground voxels. With one bin it is the prior-only baseline.
double histogram_accuracy(const Volume& v, const LabelMap& l, std::size_t classes, std::size_t bins) {
  float lo = 1e30f, hi = -1e30f;
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (l.data[i] == 0) continue;
    lo = std::min(lo, v.data[i]);
    hi = std::max(hi, v.data[i]);
  }
  auto bin = [&](float f) {
    return std::min<std::size_t>(bins - 1, static_cast<std::size_t>((f - lo) / (hi - lo + 1e-6f) * bins));
  };
  std::vector<std::vector<std::size_t>> counts(bins, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < v.data.size(); i += 2) {
    if (l.data[i]) ++counts[bin(v.data[i])][l.data[i]];
  }
  std::size_t right = 0, total = 0;
  for (std::size_t i = 1; i < v.data.size(); i += 2) {
    if (!l.data[i]) continue;
    const auto& c = counts[bin(v.data[i])];
    right += static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin()) == l.data[i];
    ++total;
  }
  return double(right) / double(total);
}

TEST(Synth, CtAloneCannotSeparateForegroundClasses) {
  for (std::uint64_t seed : {3u, 11u}) {
    CasePair cp = synth_case(seed, 48, 5);
    const double prior = histogram_accuracy(cp.ct, cp.labels, 5, 1);
    const double ct = histogram_accuracy(cp.ct, cp.labels, 5, 24);
    const double mri = histogram_accuracy(cp.mri, cp.labels, 5, 24);
    EXPECT_LE(ct, prior + 0.02) << seed;
    EXPECT_GE(mri, prior + 0.2) << seed;
  }
}

TEST(Synth, TranslateOptionShiftsMriRigidly) {
  SynthOptions opt;
  opt.noise_sigma = 0.0;
  opt.misalignment = Misalignment::translate;
  CasePair shifted = synth_case(9, 32, 4, opt);
  opt.max_displacement = 0.0;
  CasePair aligned = synth_case(9, 32, 4, opt);
  EXPECT_EQ(shifted.labels, aligned.labels);
  // Some axis-aligned integer shift of the aligned MRI reproduces the shifted one in the interior.
  bool found = false;
  for (int axis = 0; axis < 3 && !found; ++axis)
    for (int sign : {-2, 2}) {
      double err = 0;
      for (std::size_t z = 3; z < 29; ++z)
        for (std::size_t y = 3; y < 29; ++y)
          for (std::size_t x = 3; x < 29; ++x) {
            std::array<std::size_t, 3> p{z, y, x};
            p[axis] = static_cast<std::size_t>(static_cast<long>(p[axis]) + sign);
            err = std::max(err, double(std::abs(shifted.mri.at(z, y, x) - aligned.mri.at(p[0], p[1], p[2]))));
          }
      found |= err < 1e-6;
    }
  EXPECT_TRUE(found);
}

TEST(Split, SixteenFour) {
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("case_" + std::to_string(i));
  DatasetSplit s = make_split(ids, 0.8, 42);
  EXPECT_EQ(s.train.size(), 16u);
  EXPECT_EQ(s.test.size(), 4u);
  std::set<std::string> all(s.train.begin(), s.train.end());
  for (const auto& t : s.test) EXPECT_TRUE(all.insert(t).second);
  EXPECT_EQ(all, std::set<std::string>(ids.begin(), ids.end()));
  DatasetSplit again = make_split(ids, 0.8, 42);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(make_split(ids, 0.8, 43).train, s.train);
  EXPECT_THROW(make_split({"only"}, 0.8, 1), ConfigError);
}

}  // namespace
}  // namespace micformer
