// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "micformer/errors.hpp"
#include "micformer/rng.hpp"

namespace micformer {

using Extents = std::array<std::size_t, 3>;  // (D, H, W) = (z, y, x)

enum class Modality : std::uint8_t { ct, mri, other };

inline std::size_t voxel_count(const Extents& e) { return e[0] * e[1] * e[2]; }

/// 3D intensity grid, x-fastest (index = (z*H + y)*W + x).
struct Volume {
  Extents extents{1, 1, 1};
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm along (x, y, z)
  Modality modality = Modality::other;
  std::vector<float> data;

  Volume() : data(1, 0.f) {}
  Volume(Extents e, Modality m, float fill = 0.f) : extents(e), modality(m), data(voxel_count(e), fill) {}

  float& at(std::size_t z, std::size_t y, std::size_t x) { return data[(z * extents[1] + y) * extents[2] + x]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return data[(z * extents[1] + y) * extents[2] + x]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Class-index grid; 0 is background.
struct LabelMap {
  Extents extents{1, 1, 1};
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  std::vector<std::uint8_t> data;

  LabelMap() : data(1, 0) {}
  explicit LabelMap(Extents e, std::uint8_t fill = 0) : extents(e), data(voxel_count(e), fill) {}

  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return data[(z * extents[1] + y) * extents[2] + x]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return data[(z * extents[1] + y) * extents[2] + x];
  }

  /// Throws unless every voxel's class is below `classes`.
  void validate(std::size_t classes) const {
    for (auto v : data) {
      if (v >= classes) throw ConfigError("label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    }
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct CasePair {
  std::string id;
  Volume ct;
  Volume mri;
  LabelMap labels;
};

// ---------------------------------------------------------------------------
// .mvol
//
//   "MVOL" | u8 version (1) | u8 kind (0 intensity, 1 label) | u8 dtype (0 u8, 1 f32)
//   | u32 extents x, y, z | f32 spacing x, y, z | payload, x fastest | u32 CRC-32 of all preceding bytes
//
// Every multi-byte field is little-endian.

namespace mvol {

inline constexpr char kMagic[4] = {'M', 'V', 'O', 'L'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kKindIntensity = 0;
inline constexpr std::uint8_t kKindLabel = 1;
inline constexpr std::uint8_t kDtypeU8 = 0;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 3 + 12 + 12;
inline constexpr std::uint64_t kMaxVoxels = std::uint64_t(1) << 31;

}  // namespace mvol

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> mvol_header(std::uint8_t kind, std::uint8_t dtype, const Extents& e,
                                             const std::array<float, 3>& spacing) {
  std::vector<std::uint8_t> out(mvol::kMagic, mvol::kMagic + 4);
  out.push_back(mvol::kVersion);
  out.push_back(kind);
  out.push_back(dtype);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e[2]));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e[1]));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e[0]));
  for (float s : spacing) put_le<float>(out, s);
  return out;
}

inline void finish_crc(std::vector<std::uint8_t>& out) { put_le<std::uint32_t>(out, crc32_of(out.data(), out.size())); }

}  // namespace detail

inline std::vector<std::uint8_t> encode_mvol(const Volume& v) {
  auto out = detail::mvol_header(mvol::kKindIntensity, mvol::kDtypeF32, v.extents, v.spacing);
  out.reserve(out.size() + v.data.size() * 4 + 4);
  for (float f : v.data) detail::put_le<float>(out, f);
  detail::finish_crc(out);
  return out;
}

inline std::vector<std::uint8_t> encode_mvol(const LabelMap& l) {
  auto out = detail::mvol_header(mvol::kKindLabel, mvol::kDtypeU8, l.extents, l.spacing);
  out.insert(out.end(), l.data.begin(), l.data.end());
  detail::finish_crc(out);
  return out;
}

using MvolObject = std::variant<Volume, LabelMap>;

/// Parses an in-memory .mvol image. The modality is not part of the format; intensity volumes
/// come back tagged `modality`.
inline MvolObject decode_mvol(const std::vector<std::uint8_t>& bytes, Modality modality = Modality::other) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), mvol::kMagic, 4) != 0) throw FormatError("bad magic: not an MVOL file");
  if (bytes.size() < mvol::kHeaderBytes) throw FormatError("truncated MVOL header");
  const std::uint8_t* p = bytes.data();
  if (p[4] != mvol::kVersion) throw FormatError("unsupported MVOL version " + std::to_string(p[4]));
  const std::uint8_t kind = p[5], dtype = p[6];
  const std::uint64_t ex = detail::get_le<std::uint32_t>(p + 7);
  const std::uint64_t ey = detail::get_le<std::uint32_t>(p + 11);
  const std::uint64_t ez = detail::get_le<std::uint32_t>(p + 15);
  if (ex == 0 || ey == 0 || ez == 0) throw FormatError("MVOL extents must be positive");
  if (ex > mvol::kMaxVoxels || ey > mvol::kMaxVoxels || ez > mvol::kMaxVoxels || ex * ey > mvol::kMaxVoxels ||
      ex * ey * ez > mvol::kMaxVoxels) {
    throw FormatError("MVOL extents overflow the voxel limit");
  }
  std::array<float, 3> spacing{detail::get_le<float>(p + 19), detail::get_le<float>(p + 23), detail::get_le<float>(p + 27)};
  std::size_t elem;
  if (kind == mvol::kKindIntensity && dtype == mvol::kDtypeF32) {
    elem = 4;
  } else if (kind == mvol::kKindLabel && dtype == mvol::kDtypeU8) {
    elem = 1;
  } else {
    throw FormatError("unsupported MVOL kind/dtype combination " + std::to_string(kind) + "/" + std::to_string(dtype));
  }
  const std::size_t n = static_cast<std::size_t>(ex * ey * ez);
  const std::size_t expected = mvol::kHeaderBytes + n * elem + 4;
  if (bytes.size() < expected) {
    throw FormatError("truncated MVOL payload: header describes " + std::to_string(n) + " voxels (" +
                      std::to_string(expected) + " bytes), file has " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) throw FormatError("trailing bytes after MVOL payload");
  const std::uint32_t stored = detail::get_le<std::uint32_t>(p + expected - 4);
  if (stored != detail::crc32_of(p, expected - 4)) throw FormatError("MVOL checksum mismatch");
  const Extents e{static_cast<std::size_t>(ez), static_cast<std::size_t>(ey), static_cast<std::size_t>(ex)};
  const std::uint8_t* payload = p + mvol::kHeaderBytes;
  if (elem == 4) {
    Volume v(e, modality);
    v.spacing = spacing;
    for (std::size_t i = 0; i < n; ++i) v.data[i] = detail::get_le<float>(payload + 4 * i);
    return v;
  }
  LabelMap l(e);
  l.spacing = spacing;
  std::memcpy(l.data.data(), payload, n);
  return l;
}

inline void write_mvol(const Volume& v, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_mvol(v));
}
inline void write_mvol(const LabelMap& l, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_mvol(l));
}

inline MvolObject read_mvol(const std::filesystem::path& path, Modality modality = Modality::other) {
  return decode_mvol(detail::read_file(path), modality);
}

inline Volume read_volume(const std::filesystem::path& path, Modality modality) {
  auto obj = read_mvol(path, modality);
  if (!std::holds_alternative<Volume>(obj)) throw FormatError(path.string() + " holds a label map, not an intensity volume");
  return std::get<Volume>(std::move(obj));
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  auto obj = read_mvol(path);
  if (!std::holds_alternative<LabelMap>(obj)) throw FormatError(path.string() + " holds an intensity volume, not labels");
  return std::get<LabelMap>(std::move(obj));
}

// ---------------------------------------------------------------------------
// case directories: <id>_ct.mvol, <id>_mri.mvol, <id>_labels.mvol

inline void write_case(const CasePair& cp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_mvol(cp.ct, dir / (cp.id + "_ct.mvol"));
  write_mvol(cp.mri, dir / (cp.id + "_mri.mvol"));
  write_mvol(cp.labels, dir / (cp.id + "_labels.mvol"));
}

inline CasePair read_case(const std::filesystem::path& dir, const std::string& id) {
  CasePair cp;
  cp.id = id;
  cp.ct = read_volume(dir / (id + "_ct.mvol"), Modality::ct);
  cp.mri = read_volume(dir / (id + "_mri.mvol"), Modality::mri);
  cp.labels = read_labels(dir / (id + "_labels.mvol"));
  if (cp.ct.extents != cp.labels.extents || cp.mri.extents != cp.labels.extents) {
    throw ShapeError("case '" + id + "': CT, MRI and labels do not share extents");
  }
  return cp;
}

// ---------------------------------------------------------------------------
// preprocessing

/// Zero mean, unit variance; constant volumes map to all zeros.
inline Volume normalize_intensity(const Volume& v) {
  Volume out = v;
  const double n = static_cast<double>(v.data.size());
  double mu = 0;
  for (float f : v.data) mu += f;
  mu /= n;
  double var = 0;
  for (float f : v.data) var += (f - mu) * (f - mu);
  var /= n;
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    out.data[i] = sd > 1e-12 ? static_cast<float>((v.data[i] - mu) / sd) : 0.f;
  }
  return out;
}

/// Result of padding: the padded object plus what is needed to crop back.
template <typename V>
struct Padded {
  V value;
  Extents before{0, 0, 0};
  Extents original{1, 1, 1};
};

namespace detail {

template <typename V>
V pad_grid(const V& v, const Extents& target, const Extents& before) {
  V out = v;
  out.extents = target;
  using Elem = typename decltype(v.data)::value_type;
  out.data.assign(voxel_count(target), Elem(0));
  for (std::size_t z = 0; z < v.extents[0]; ++z)
    for (std::size_t y = 0; y < v.extents[1]; ++y)
      for (std::size_t x = 0; x < v.extents[2]; ++x)
        out.at(z + before[0], y + before[1], x + before[2]) = v.at(z, y, x);
  return out;
}

}  // namespace detail

/// Symmetric zero padding (background for labels) up to the next multiple on every axis.
template <typename V>
Padded<V> pad_to_divisible(const V& v, std::size_t multiple) {
  if (multiple == 0) throw ConfigError("padding multiple must be >= 1");
  Extents target, before;
  for (int a = 0; a < 3; ++a) {
    target[a] = (v.extents[a] + multiple - 1) / multiple * multiple;
    before[a] = (target[a] - v.extents[a]) / 2;
  }
  return Padded<V>{detail::pad_grid(v, target, before), before, v.extents};
}

/// Symmetric zero padding up to exactly `target` on every axis.
template <typename V>
Padded<V> pad_to_extents(const V& v, const Extents& target) {
  Extents before;
  for (int a = 0; a < 3; ++a) {
    if (v.extents[a] > target[a]) {
      throw ShapeError("extent " + std::to_string(v.extents[a]) + " exceeds padding target " + std::to_string(target[a]));
    }
    before[a] = (target[a] - v.extents[a]) / 2;
  }
  return Padded<V>{detail::pad_grid(v, target, before), before, v.extents};
}

/// Cuts the `original` box starting at `before` back out of a padded grid.
template <typename V>
V crop(const V& v, const Extents& before, const Extents& original) {
  for (int a = 0; a < 3; ++a) {
    if (before[a] + original[a] > v.extents[a]) throw ShapeError("crop box exceeds the padded grid");
  }
  V out = v;
  out.extents = original;
  out.data.resize(voxel_count(original));
  for (std::size_t z = 0; z < original[0]; ++z)
    for (std::size_t y = 0; y < original[1]; ++y)
      for (std::size_t x = 0; x < original[2]; ++x)
        out.at(z, y, x) = v.at(z + before[0], y + before[1], x + before[2]);
  return out;
}

// ---------------------------------------------------------------------------
// synthetic cases

enum class Misalignment { smooth, translate };

struct SynthOptions {
  double noise_sigma = 0.1;
  double mri_blur_sigma = 2.0;
  /// Largest MRI-to-CT displacement in voxels.
  double max_displacement = 2.0;
  /// smooth: random low-frequency field; translate: one rigid shift of max_displacement along a random axis.
  Misalignment misalignment = Misalignment::smooth;
};

struct Ellipsoid {
  std::array<double, 3> center;  // (z, y, x)
  std::array<double, 3> semi_axes;
  std::uint8_t label;
};

namespace detail {

inline std::vector<float> gaussian_blur(const std::vector<float>& src, const Extents& e, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  std::vector<float> a = src, b(src.size());
  const long D = static_cast<long>(e[0]), H = static_cast<long>(e[1]), W = static_cast<long>(e[2]);
  const long stride[3] = {H * W, W, 1};
  const long ext[3] = {D, H, W};
  for (int axis = 0; axis < 3; ++axis) {
    for (long z = 0; z < D; ++z)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          const long pos[3] = {z, y, x};
          const long base = (z * H + y) * W + x;
          double acc = 0;
          for (int t = -radius; t <= radius; ++t) {
            const long q = std::clamp(pos[axis] + t, 0L, ext[axis] - 1);
            acc += k[t + radius] * a[base + (q - pos[axis]) * stride[axis]];
          }
          b[base] = static_cast<float>(acc);
        }
    std::swap(a, b);
  }
  return a;
}

/// Scalar trilinear lookup at (z, y, x) with clamped borders.
inline float sample_clamped(const std::vector<float>& v, const Extents& e, double z, double y, double x) {
  const double p[3] = {z, y, x};
  std::size_t lo[3], hi[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(p[a], 0.0, static_cast<double>(e[a] - 1));
    lo[a] = static_cast<std::size_t>(std::floor(c));
    hi[a] = std::min(lo[a] + 1, e[a] - 1);
    f[a] = c - static_cast<double>(lo[a]);
  }
  double acc = 0;
  for (int corner = 0; corner < 8; ++corner) {
    const int bz = corner >> 2 & 1, by = corner >> 1 & 1, bx = corner & 1;
    const double w = (bz ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bx ? f[2] : 1 - f[2]);
    if (w == 0) continue;
    acc += w * v[((bz ? hi[0] : lo[0]) * e[1] + (by ? hi[1] : lo[1])) * e[2] + (bx ? hi[2] : lo[2])];
  }
  return static_cast<float>(acc);
}

inline std::vector<Ellipsoid> place_ellipsoids(Rng& rng, std::size_t edge, std::size_t classes) {
  const double E = static_cast<double>(edge);
  for (int restart = 0; restart < 50; ++restart) {
    std::vector<Ellipsoid> placed;
    for (std::size_t c = 1; c < classes; ++c) {
      bool ok = false;
      for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
        Ellipsoid el;
        for (auto& s : el.semi_axes) s = rng.uniform(0.08 * E, 0.16 * E);
        const double rmax = *std::max_element(el.semi_axes.begin(), el.semi_axes.end());
        const double margin = rmax + 2.0;
        for (auto& ctr : el.center) ctr = rng.uniform(margin, E - 1 - margin);
        el.label = static_cast<std::uint8_t>(c);
        ok = std::all_of(placed.begin(), placed.end(), [&](const Ellipsoid& o) {
          const double r2 = *std::max_element(o.semi_axes.begin(), o.semi_axes.end());
          double d2 = 0;
          for (int a = 0; a < 3; ++a) d2 += (el.center[a] - o.center[a]) * (el.center[a] - o.center[a]);
          return std::sqrt(d2) > rmax + r2 + 2.0;
        });
        if (ok) placed.push_back(el);
      }
      if (!ok) break;
    }
    if (placed.size() == classes - 1) return placed;
  }
  throw ConfigError("could not place " + std::to_string(classes - 1) + " non-overlapping ellipsoids in a " +
                    std::to_string(edge) + "^3 volume");
}

}  // namespace detail

/// Deterministic two-modality phantom. Labels are K-1 non-overlapping ellipsoids. CT shows every
/// structure with the same intensity and sharp edges; MRI gives each class its own intensity but
/// is blurred, noisier in effect, and displaced by up to `max_displacement` voxels.
inline CasePair synth_case(std::uint64_t seed, std::size_t edge, std::size_t classes, const SynthOptions& opt = {}) {
  if (edge < 32) throw ConfigError("synthetic edge must be >= 32, got " + std::to_string(edge));
  if (classes < 3 || classes > 255) throw ConfigError("synthetic class count must be in [3, 255], got " + std::to_string(classes));
  Rng rng(derive_seed(seed, hash_name("synth_case")));
  const Extents e{edge, edge, edge};
  const auto shapes = detail::place_ellipsoids(rng, edge, classes);

  CasePair cp;
  cp.id = "case_" + std::to_string(seed);
  cp.labels = LabelMap(e);
  for (std::size_t z = 0; z < edge; ++z)
    for (std::size_t y = 0; y < edge; ++y)
      for (std::size_t x = 0; x < edge; ++x) {
        const double p[3] = {double(z), double(y), double(x)};
        for (const auto& el : shapes) {
          double r = 0;
          for (int a = 0; a < 3; ++a) r += std::pow((p[a] - el.center[a]) / el.semi_axes[a], 2);
          if (r <= 1.0) {
            cp.labels.at(z, y, x) = el.label;
            break;
          }
        }
      }

  // Class-specific MRI contrast in CT geometry, blurred, then warped.
  std::vector<float> mri_clean(voxel_count(e));
  for (std::size_t i = 0; i < mri_clean.size(); ++i) {
    const auto c = cp.labels.data[i];
    mri_clean[i] = c == 0 ? 0.f : static_cast<float>(0.25 + 0.75 * (c - 1) / double(classes - 2));
  }
  mri_clean = detail::gaussian_blur(mri_clean, e, opt.mri_blur_sigma);

  // Displacement field (dz, dy, dx) per voxel.
  std::vector<std::array<double, 3>> disp(voxel_count(e), {0, 0, 0});
  if (opt.misalignment == Misalignment::translate) {
    const std::size_t axis = rng.below(3);
    const double sign = rng.below(2) ? 1.0 : -1.0;
    for (auto& d : disp) d[axis] = sign * opt.max_displacement;
  } else {
    struct Wave {
      std::array<double, 3> k;
      double phase;
    };
    std::array<std::array<Wave, 2>, 3> waves;
    for (auto& comp : waves)
      for (auto& w : comp) {
        for (auto& kk : w.k) kk = rng.uniform(-1.5, 1.5) * 6.283185307179586 / double(edge);
        w.phase = rng.uniform(0, 6.283185307179586);
      }
    double peak = 0;
    for (std::size_t z = 0, i = 0; z < edge; ++z)
      for (std::size_t y = 0; y < edge; ++y)
        for (std::size_t x = 0; x < edge; ++x, ++i) {
          double n2 = 0;
          for (int a = 0; a < 3; ++a) {
            double v = 0;
            for (const auto& w : waves[a]) v += std::sin(w.k[0] * z + w.k[1] * y + w.k[2] * x + w.phase);
            disp[i][a] = v;
            n2 += v * v;
          }
          peak = std::max(peak, std::sqrt(n2));
        }
    const double s = peak > 0 ? opt.max_displacement / peak : 0.0;
    for (auto& d : disp)
      for (auto& v : d) v *= s;
  }

  cp.ct = Volume(e, Modality::ct);
  cp.mri = Volume(e, Modality::mri);
  for (std::size_t z = 0, i = 0; z < edge; ++z)
    for (std::size_t y = 0; y < edge; ++y)
      for (std::size_t x = 0; x < edge; ++x, ++i) {
        cp.ct.data[i] = (cp.labels.data[i] ? 1.f : 0.f) + static_cast<float>(opt.noise_sigma * rng.normal());
      }
  for (std::size_t z = 0, i = 0; z < edge; ++z)
    for (std::size_t y = 0; y < edge; ++y)
      for (std::size_t x = 0; x < edge; ++x, ++i) {
        const auto& d = disp[i];
        cp.mri.data[i] = detail::sample_clamped(mri_clean, e, z + d[0], y + d[1], x + d[2]) +
                         static_cast<float>(opt.noise_sigma * rng.normal());
      }
  return cp;
}

// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Seeded shuffle, then the first round(fraction * n) ids train and the rest test.
inline DatasetSplit make_split(std::vector<std::string> ids, double train_fraction, std::uint64_t seed) {
  if (ids.size() < 2) throw ConfigError("a split needs at least 2 cases, got " + std::to_string(ids.size()));
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  Rng rng(derive_seed(seed, hash_name("make_split")));
  rng.shuffle(ids.begin(), ids.end());
  auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(ids.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  DatasetSplit s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
  s.test.assign(ids.begin() + static_cast<long>(n_train), ids.end());
  return s;
}

}  // namespace micformer
