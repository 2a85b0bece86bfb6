// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <optional>

#include "micformer/tensor.hpp"

namespace micformer {

/// Channel-last token lattice [D, H, W, C]. Axis order is (z, y, x, channel).
template <typename T>
struct TokenGrid {
  Tensor<T> tensor;

  TokenGrid() = default;
  explicit TokenGrid(Tensor<T> t) : tensor(std::move(t)) {
    if (tensor.rank() != 4) throw ShapeError("token grid must be rank 4 [D,H,W,C], got " + shape_str(tensor.shape()));
  }

  std::size_t depth() const { return tensor.shape()[0]; }
  std::size_t height() const { return tensor.shape()[1]; }
  std::size_t width() const { return tensor.shape()[2]; }
  std::size_t channels() const { return tensor.shape()[3]; }
  std::array<std::size_t, 3> extents() const { return {depth(), height(), width()}; }
  std::size_t tokens() const { return depth() * height() * width(); }
};

/// Depthwise k*k*k filters (one per input channel) followed by 1x1x1 channel mixing.
template <typename T>
struct ConvKernel3D {
  Tensor<T> depthwise;  // [k, k, k, C_in]
  Tensor<T> pointwise;  // [C_in, C_out]
  std::optional<Tensor<T>> bias;  // [C_out]

  std::size_t kernel() const { return depthwise.shape()[0]; }
  std::size_t in_channels() const { return depthwise.shape()[3]; }
  std::size_t out_channels() const { return pointwise.shape()[1]; }
};

// ---------------------------------------------------------------------------

/// x[..., in] W[in, out] + b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias = std::nullopt) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.shape()[0]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t in = weight.shape()[0], out = weight.shape()[1];
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor<T> y = matmul(reshape(x, {rows, in}), weight);
  if (bias) {
    if (bias->rank() != 1 || bias->shape()[0] != out) {
      throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match " + std::to_string(out));
    }
    y = add(y, *bias);
  }
  return reshape(y, std::move(out_shape));
}

/// Per-position standardization over the last axis, then gamma * x_hat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm on a scalar");
  const std::size_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(c) + " entries");
  }
  if (!(eps > T(0))) throw DomainError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel()), xhat(x.numel()), inv(rows);
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = h * pg[j] + pb[j];
    }
  }
  auto gs = gamma.storage();
  return detail::finish<T>(
      OpKind::layer_norm, x.shape(), std::move(out), {&x, &gamma, &beta},
      [c, rows, gs, xhat = std::move(xhat), inv = std::move(inv)](std::span<const T> g,
                                                                  std::span<std::vector<T>* const> gi) {
        T* gx = gi[0]->data();
        T* gg = gi[1]->data();
        T* gb = gi[2]->data();
        const T* gam = gs->data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * c;
          const T* hr = xhat.data() + r * c;
          T s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = gr[j] * gam[j];
            s1 += dh;
            s2 += dh * hr[j];
            gg[j] += gr[j] * hr[j];
            gb[j] += gr[j];
          }
          const T k = inv[r] / static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = gr[j] * gam[j];
            gx[r * c + j] += k * (static_cast<T>(c) * dh - s1 - hr[j] * s2);
          }
        }
      });
}

/// Per-channel 3D convolution, stride 1, symmetric zero padding (k-1)/2.
template <typename T>
TokenGrid<T> depthwise_conv3d(const TokenGrid<T>& x, const Tensor<T>& weight) {
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[0] != ws[1] || ws[1] != ws[2]) {
    throw ShapeError("depthwise weight must be [k,k,k,C], got " + shape_str(ws));
  }
  const std::size_t k = ws[0];
  if (k % 2 == 0) throw ShapeError("depthwise kernel edge must be odd, got " + std::to_string(k));
  const std::size_t C = x.channels();
  if (ws[3] != C) {
    throw ShapeError("depthwise weight has " + std::to_string(ws[3]) + " channels, input has " + std::to_string(C));
  }
  const long D = static_cast<long>(x.depth()), H = static_cast<long>(x.height()), W = static_cast<long>(x.width());
  const long r = static_cast<long>(k / 2);
  const long kk = static_cast<long>(k);

  // Visits (output voxel, tap, input voxel) triples inside the volume.
  auto for_each_tap = [=](auto&& fn) {
    for (long z = 0; z < D; ++z)
      for (long y = 0; y < H; ++y)
        for (long xx = 0; xx < W; ++xx) {
          const std::size_t o = static_cast<std::size_t>((z * H + y) * W + xx) * C;
          for (long dz = 0; dz < kk; ++dz) {
            const long iz = z + dz - r;
            if (iz < 0 || iz >= D) continue;
            for (long dy = 0; dy < kk; ++dy) {
              const long iy = y + dy - r;
              if (iy < 0 || iy >= H) continue;
              for (long dx = 0; dx < kk; ++dx) {
                const long ix = xx + dx - r;
                if (ix < 0 || ix >= W) continue;
                const std::size_t i = static_cast<std::size_t>((iz * H + iy) * W + ix) * C;
                const std::size_t t = static_cast<std::size_t>((dz * kk + dy) * kk + dx) * C;
                fn(o, t, i);
              }
            }
          }
        }
  };

  std::vector<T> out(x.tensor.numel(), T(0));
  const T* px = x.tensor.data().data();
  const T* pw = weight.data().data();
  for_each_tap([&](std::size_t o, std::size_t t, std::size_t i) {
    for (std::size_t c = 0; c < C; ++c) out[o + c] += pw[t + c] * px[i + c];
  });
  auto xs = x.tensor.storage(), wts = weight.storage();
  return TokenGrid<T>(detail::finish<T>(
      OpKind::depthwise_conv3d, x.tensor.shape(), std::move(out), {&x.tensor, &weight},
      [=](std::span<const T> g, std::span<std::vector<T>* const> gi) {
        T* gx = gi[0]->data();
        T* gw = gi[1]->data();
        const T* xv = xs->data();
        const T* wv = wts->data();
        for_each_tap([&](std::size_t o, std::size_t t, std::size_t i) {
          for (std::size_t c = 0; c < C; ++c) {
            gx[i + c] += g[o + c] * wv[t + c];
            gw[t + c] += g[o + c] * xv[i + c];
          }
        });
      }));
}

template <typename T>
TokenGrid<T> depthwise_separable_conv3d(const TokenGrid<T>& x, const ConvKernel3D<T>& kernel) {
  if (kernel.in_channels() != x.channels() || kernel.pointwise.shape()[0] != x.channels()) {
    throw ShapeError("conv kernel expects " + std::to_string(kernel.in_channels()) + " channels, input has " +
                     std::to_string(x.channels()));
  }
  TokenGrid<T> dw = depthwise_conv3d(x, kernel.depthwise);
  return TokenGrid<T>(linear(dw.tensor, kernel.pointwise, kernel.bias));
}

/// Trilinear interpolation of `x` at continuous voxel coordinates.
/// coords[..., 0..2] hold (x, y, z) = (width, height, depth) indices and are clamped to
/// [0, extent - 1] before interpolation. Differentiable in both the features and the coordinates;
/// clamped coordinates receive zero gradient.
template <typename T>
TokenGrid<T> trilinear_sample(const TokenGrid<T>& x, const Tensor<T>& coords) {
  if (coords.rank() != 4 || coords.shape()[3] != 3) {
    throw ShapeError("sample coordinates must be [D,H,W,3], got " + shape_str(coords.shape()));
  }
  for (T v : coords.data()) {
    if (!std::isfinite(v)) throw DomainError("non-finite sample coordinate");
  }
  const std::size_t C = x.channels();
  const std::array<std::size_t, 3> ext = {x.width(), x.height(), x.depth()};  // indexed by coordinate channel
  const std::size_t n = coords.numel() / 3;

  // Per output point: base corner per axis, fraction per axis, and whether the axis was clamped.
  struct Corner {
    std::array<std::size_t, 3> lo;
    std::array<std::size_t, 3> hi;
    std::array<T, 3> frac;
    std::array<bool, 3> clamped;
  };
  std::vector<Corner> corners(n);
  const T* pc = coords.data().data();
  for (std::size_t p = 0; p < n; ++p) {
    Corner& cr = corners[p];
    for (int a = 0; a < 3; ++a) {
      const T hiv = static_cast<T>(ext[a] - 1);
      T v = pc[p * 3 + a];
      cr.clamped[a] = v < T(0) || v > hiv;
      v = std::clamp(v, T(0), hiv);
      if (ext[a] == 1) {
        cr.lo[a] = cr.hi[a] = 0;
        cr.frac[a] = T(0);
        continue;
      }
      std::size_t i0 = static_cast<std::size_t>(std::floor(v));
      if (i0 > ext[a] - 2) i0 = ext[a] - 2;
      cr.lo[a] = i0;
      cr.hi[a] = i0 + 1;
      cr.frac[a] = v - static_cast<T>(i0);
    }
  }
  const std::size_t W = x.width(), H = x.height();
  auto offset = [=](std::size_t xi, std::size_t yi, std::size_t zi) { return ((zi * H + yi) * W + xi) * C; };

  std::vector<T> out(n * C, T(0));
  const T* px = x.tensor.data().data();
  for (std::size_t p = 0; p < n; ++p) {
    const Corner& cr = corners[p];
    for (int corner = 0; corner < 8; ++corner) {
      const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
      const T wgt = (bx ? cr.frac[0] : T(1) - cr.frac[0]) * (by ? cr.frac[1] : T(1) - cr.frac[1]) *
                    (bz ? cr.frac[2] : T(1) - cr.frac[2]);
      const T* src = px + offset(bx ? cr.hi[0] : cr.lo[0], by ? cr.hi[1] : cr.lo[1], bz ? cr.hi[2] : cr.lo[2]);
      T* dst = out.data() + p * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += wgt * src[c];
    }
  }
  Shape shape(coords.shape().begin(), coords.shape().end() - 1);
  shape.push_back(C);
  auto xs = x.tensor.storage();
  return TokenGrid<T>(detail::finish<T>(
      OpKind::trilinear_sample, std::move(shape), std::move(out), {&x.tensor, &coords},
      [=, corners = std::move(corners)](std::span<const T> g, std::span<std::vector<T>* const> gi) {
        T* gx = gi[0]->data();
        T* gc = gi[1]->data();
        const T* xv = xs->data();
        for (std::size_t p = 0; p < n; ++p) {
          const Corner& cr = corners[p];
          const T* gp = g.data() + p * C;
          std::array<T, 3> dcoord = {0, 0, 0};
          for (int corner = 0; corner < 8; ++corner) {
            const int b[3] = {corner & 1, (corner >> 1) & 1, (corner >> 2) & 1};
            T f[3], df[3];
            for (int a = 0; a < 3; ++a) {
              f[a] = b[a] ? cr.frac[a] : T(1) - cr.frac[a];
              df[a] = b[a] ? T(1) : T(-1);
            }
            const std::size_t off = offset(b[0] ? cr.hi[0] : cr.lo[0], b[1] ? cr.hi[1] : cr.lo[1],
                                           b[2] ? cr.hi[2] : cr.lo[2]);
            const T wgt = f[0] * f[1] * f[2];
            T dot = 0;
            for (std::size_t c = 0; c < C; ++c) {
              gx[off + c] += wgt * gp[c];
              dot += gp[c] * xv[off + c];
            }
            dcoord[0] += dot * df[0] * f[1] * f[2];
            dcoord[1] += dot * f[0] * df[1] * f[2];
            dcoord[2] += dot * f[0] * f[1] * df[2];
          }
          for (int a = 0; a < 3; ++a) {
            if (!cr.clamped[a] && ext[a] > 1) gc[p * 3 + a] += dcoord[a];
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// U-shape rearrangements

namespace detail {

/// Indices that gather each non-overlapping f^3 block of a [D,H,W,C] lattice into one token of
/// f^3*C channels, block-internal order (dz, dy, dx, c).
inline IndexList block_gather_index(std::size_t D, std::size_t H, std::size_t W, std::size_t C, std::size_t f) {
  const std::size_t d = D / f, h = H / f, w = W / f;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(D * H * W * C);
  std::size_t o = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t dz = 0; dz < f; ++dz)
          for (std::size_t dy = 0; dy < f; ++dy)
            for (std::size_t dx = 0; dx < f; ++dx)
              for (std::size_t c = 0; c < C; ++c)
                (*idx)[o++] = static_cast<std::uint32_t>((((z * f + dz) * H + (y * f + dy)) * W + (x * f + dx)) * C + c);
  return idx;
}

/// Inverse rearrangement: token channels (dz, dy, dx, c) of a [d,h,w,f^3*C] lattice spread
/// onto a [d*f, h*f, w*f, C] lattice.
inline IndexList block_scatter_index(std::size_t d, std::size_t h, std::size_t w, std::size_t C, std::size_t f) {
  const std::size_t D = d * f, H = h * f, W = w * f;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(D * H * W * C);
  const std::size_t tc = f * f * f * C;
  for (std::size_t Z = 0; Z < D; ++Z)
    for (std::size_t Y = 0; Y < H; ++Y)
      for (std::size_t X = 0; X < W; ++X) {
        const std::size_t tok = ((Z / f) * h + (Y / f)) * w + (X / f);
        const std::size_t sub = ((Z % f) * f + (Y % f)) * f + (X % f);
        for (std::size_t c = 0; c < C; ++c) {
          (*idx)[((Z * H + Y) * W + X) * C + c] = static_cast<std::uint32_t>(tok * tc + sub * C + c);
        }
      }
  return idx;
}

}  // namespace detail

/// Splits a [D,H,W] intensity tensor into non-overlapping p^3 blocks and projects each to C channels.
template <typename T>
TokenGrid<T> patch_embed(const Tensor<T>& volume, std::size_t patch, const Tensor<T>& weight,
                         const std::optional<Tensor<T>>& bias) {
  if (volume.rank() != 3) throw ShapeError("patch_embed expects a [D,H,W] volume, got " + shape_str(volume.shape()));
  const std::size_t D = volume.shape()[0], H = volume.shape()[1], W = volume.shape()[2];
  if (patch == 0 || D % patch || H % patch || W % patch) {
    throw ShapeError("volume extents " + shape_str(volume.shape()) + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t p3 = patch * patch * patch;
  Tensor<T> blocks = gather(volume, {D / patch, H / patch, W / patch, p3},
                            detail::block_gather_index(D, H, W, 1, patch));
  return TokenGrid<T>(linear(blocks, weight, bias));
}

/// Concatenates each 2^3 neighborhood (8C channels) and projects to 2C with weight [8C, 2C].
template <typename T>
TokenGrid<T> patch_merge(const TokenGrid<T>& x, const Tensor<T>& weight) {
  const std::size_t D = x.depth(), H = x.height(), W = x.width(), C = x.channels();
  if (D % 2 || H % 2 || W % 2) {
    throw ShapeError("patch_merge needs even extents, got " + shape_str(x.tensor.shape()));
  }
  Tensor<T> merged = gather(x.tensor, {D / 2, H / 2, W / 2, 8 * C}, detail::block_gather_index(D, H, W, C, 2));
  return TokenGrid<T>(linear(merged, weight));
}

/// Projects C -> f^3 * C_out channels with weight [C, f^3*C_out] and unfolds each token onto an
/// f-times finer lattice.
template <typename T>
TokenGrid<T> patch_expand_by(const TokenGrid<T>& x, const Tensor<T>& weight, std::size_t factor) {
  const std::size_t f3 = factor * factor * factor;
  if (weight.rank() != 2 || weight.shape()[1] % f3) {
    throw ShapeError("expand weight " + shape_str(weight.shape()) + " not divisible into " + std::to_string(f3) +
                     " sub-voxels");
  }
  const std::size_t cout = weight.shape()[1] / f3;
  Tensor<T> y = linear(x.tensor, weight);
  const std::size_t d = x.depth(), h = x.height(), w = x.width();
  return TokenGrid<T>(gather(y, {d * factor, h * factor, w * factor, cout},
                             detail::block_scatter_index(d, h, w, cout, factor)));
}

/// [D,H,W,C] -> [2D,2H,2W,C/2] with weight [C, 4C].
template <typename T>
TokenGrid<T> patch_expand(const TokenGrid<T>& x, const Tensor<T>& weight) {
  if (x.channels() % 2) throw ShapeError("patch_expand needs an even channel count, got " + std::to_string(x.channels()));
  if (weight.rank() != 2 || weight.shape()[0] != x.channels() || weight.shape()[1] != 4 * x.channels()) {
    throw ShapeError("patch_expand weight must be [C, 4C], got " + shape_str(weight.shape()));
  }
  return patch_expand_by(x, weight, 2);
}

}  // namespace micformer
