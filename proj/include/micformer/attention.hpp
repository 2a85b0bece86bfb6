// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// Windowed attention over 3D token lattices.
//
// Self-attention (w_msa) and the cross-modal variant (w_mca) share one kernel: queries,
// keys and values are projected from possibly different windowed streams, the logits get a
// learned relative-position bias, and a softmax over keys weights the values. In w_mca the
// queries and values come from the querying stream b and the keys from stream a:
//
//     Attn = softmax(Q_b K_a^T / sqrt(d) + B),   out = Attn V_b
//
// where d is the per-head key dimension. The deformable operator resamples stream a with a
// predicted per-voxel displacement before it is windowed.

#pragma once

#include <array>
#include <cmath>
#include <string>

#include "micformer/nn_ops.hpp"

namespace micformer {

/// Which stream the values are projected from in cross-attention.
enum class ValueSource { b, a };

inline std::string to_string(ValueSource v) { return v == ValueSource::b ? "b" : "a"; }

inline ValueSource parse_value_source(const std::string& s) {
  if (s == "b") return ValueSource::b;
  if (s == "a") return ValueSource::a;
  throw ConfigError("value_source must be 'a' or 'b', got '" + s + "'");
}

template <typename T>
struct WindowSet {
  Tensor<T> windows;  // [num_windows, w^3, C]
  std::array<std::size_t, 3> extents{};  // source lattice (D, H, W)
  std::size_t window = 0;
  std::size_t shift = 0;

  std::size_t num_windows() const { return windows.shape()[0]; }
  std::size_t tokens_per_window() const { return windows.shape()[1]; }
  std::size_t channels() const { return windows.shape()[2]; }
};

/// Displacements in voxel units, channels (x, y, z), spatial extents equal to the feature map.
template <typename T>
struct OffsetField {
  Tensor<T> tensor;  // [D, H, W, 3]

  OffsetField() = default;
  explicit OffsetField(Tensor<T> t) : tensor(std::move(t)) {
    if (tensor.rank() != 4 || tensor.shape()[3] != 3) {
      throw ShapeError("offset field must be [D,H,W,3], got " + shape_str(tensor.shape()));
    }
  }
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv;  // [C, C], [C]
  Tensor<T> wo, bo;  // output projection
  Tensor<T> rel_bias;  // [(2w-1)^3, heads]
  std::size_t heads = 1;
  std::size_t window = 1;  // window edge the bias table was built for
  ValueSource value_source = ValueSource::b;

  std::size_t channels() const { return wq.shape()[0]; }
  std::size_t head_dim() const { return channels() / heads; }
};

// ---------------------------------------------------------------------------
// windowing

namespace detail {

/// For each (window, token) slot, the flat token index in the rolled source lattice.
inline std::vector<std::uint32_t> window_token_order(const std::array<std::size_t, 3>& ext, std::size_t w,
                                                     std::size_t shift) {
  const std::size_t D = ext[0], H = ext[1], W = ext[2];
  std::vector<std::uint32_t> order(D * H * W);
  std::size_t o = 0;
  for (std::size_t wz = 0; wz < D / w; ++wz)
    for (std::size_t wy = 0; wy < H / w; ++wy)
      for (std::size_t wx = 0; wx < W / w; ++wx)
        for (std::size_t iz = 0; iz < w; ++iz)
          for (std::size_t iy = 0; iy < w; ++iy)
            for (std::size_t ix = 0; ix < w; ++ix) {
              const std::size_t z = (wz * w + iz + shift) % D;
              const std::size_t y = (wy * w + iy + shift) % H;
              const std::size_t x = (wx * w + ix + shift) % W;
              order[o++] = static_cast<std::uint32_t>((z * H + y) * W + x);
            }
  return order;
}

inline IndexList expand_channels(const std::vector<std::uint32_t>& token_index, std::size_t C) {
  auto idx = std::make_shared<std::vector<std::uint32_t>>(token_index.size() * C);
  for (std::size_t t = 0; t < token_index.size(); ++t)
    for (std::size_t c = 0; c < C; ++c) (*idx)[t * C + c] = static_cast<std::uint32_t>(token_index[t] * C + c);
  return idx;
}

inline void check_window(const std::array<std::size_t, 3>& ext, std::size_t w, std::size_t shift) {
  if (w == 0 || ext[0] % w || ext[1] % w || ext[2] % w) {
    throw ShapeError("lattice [" + std::to_string(ext[0]) + ", " + std::to_string(ext[1]) + ", " +
                     std::to_string(ext[2]) + "] not divisible by window " + std::to_string(w));
  }
  if (shift != 0 && shift != w / 2) {
    throw ShapeError("window shift must be 0 or w/2, got " + std::to_string(shift));
  }
}

}  // namespace detail

/// Cyclic roll by -shift on every spatial axis, then split into non-overlapping w^3 windows.
template <typename T>
WindowSet<T> window_partition(const TokenGrid<T>& x, std::size_t w, std::size_t shift) {
  const auto ext = x.extents();
  detail::check_window(ext, w, shift);
  const std::size_t C = x.channels();
  const std::size_t nw = x.tokens() / (w * w * w);
  auto order = detail::window_token_order(ext, w, shift);
  Tensor<T> windows = gather(x.tensor, {nw, w * w * w, C}, detail::expand_channels(order, C));
  return WindowSet<T>{std::move(windows), ext, w, shift};
}

/// Exact inverse of window_partition, including the inverse roll.
template <typename T>
TokenGrid<T> window_reverse(const WindowSet<T>& ws) {
  const auto& ext = ws.extents;
  detail::check_window(ext, ws.window, ws.shift);
  const std::size_t w3 = ws.window * ws.window * ws.window;
  const std::size_t tokens = ext[0] * ext[1] * ext[2];
  if (ws.windows.rank() != 3 || ws.num_windows() * ws.tokens_per_window() != tokens ||
      ws.tokens_per_window() != w3) {
    throw ShapeError("window set " + shape_str(ws.windows.shape()) + " inconsistent with its lattice metadata");
  }
  auto order = detail::window_token_order(ext, ws.window, ws.shift);
  std::vector<std::uint32_t> inverse(order.size());
  for (std::size_t slot = 0; slot < order.size(); ++slot) inverse[order[slot]] = static_cast<std::uint32_t>(slot);
  const std::size_t C = ws.channels();
  return TokenGrid<T>(gather(ws.windows, {ext[0], ext[1], ext[2], C}, detail::expand_channels(inverse, C)));
}

// ---------------------------------------------------------------------------
// attention kernel

namespace detail {

/// Gather indices turning the bias table [(2W-1)^3, h] into a [h, n, n] logit bias for a window
/// of edge w <= W (the table's window).
inline IndexList relative_bias_index(std::size_t w, std::size_t table_window, std::size_t heads) {
  const std::size_t n = w * w * w;
  const std::size_t span = 2 * table_window - 1;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(heads * n * n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const long zi = static_cast<long>(i / (w * w)), yi = static_cast<long>((i / w) % w), xi = static_cast<long>(i % w);
        const long zj = static_cast<long>(j / (w * w)), yj = static_cast<long>((j / w) % w), xj = static_cast<long>(j % w);
        const long off = static_cast<long>(table_window) - 1;
        const std::size_t rel = static_cast<std::size_t>(((zi - zj + off) * static_cast<long>(span) + (yi - yj + off)) *
                                                             static_cast<long>(span) +
                                                         (xi - xj + off));
        (*idx)[(h * n + i) * n + j] = static_cast<std::uint32_t>(rel * heads + h);
      }
  return idx;
}

/// [nW, n, C] -> [nW, h, n, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t nw = x.shape()[0], n = x.shape()[1], c = x.shape()[2];
  return permute(reshape(x, {nw, n, heads, c / heads}), {0, 2, 1, 3});
}

template <typename T>
void check_attention(const WindowSet<T>& ws, const AttentionParams<T>& p) {
  const std::size_t C = ws.channels();
  if (p.heads == 0 || C % p.heads) {
    throw ShapeError("channel count " + std::to_string(C) + " not divisible by " + std::to_string(p.heads) + " heads");
  }
  if (p.channels() != C) {
    throw ShapeError("attention params expect " + std::to_string(p.channels()) + " channels, windows have " +
                     std::to_string(C));
  }
  if (ws.window > p.window) {
    throw ShapeError("window edge " + std::to_string(ws.window) + " exceeds bias table window " +
                     std::to_string(p.window));
  }
}

}  // namespace detail

/// Attention probabilities softmax(Q K^T / sqrt(d) + B), shape [nW, h, n, n].
template <typename T>
Tensor<T> attention_map(const WindowSet<T>& queries, const WindowSet<T>& keys, const AttentionParams<T>& p) {
  detail::check_attention(queries, p);
  const std::size_t h = p.heads, n = queries.tokens_per_window();
  const std::size_t d = p.head_dim();
  Tensor<T> q = detail::split_heads(linear(queries.windows, p.wq, std::optional<Tensor<T>>(p.bq)), h);
  Tensor<T> k = detail::split_heads(linear(keys.windows, p.wk, std::optional<Tensor<T>>(p.bk)), h);
  Tensor<T> kt = permute(k, {0, 1, 3, 2});
  Tensor<T> logits = scale(matmul(q, kt), T(1) / std::sqrt(static_cast<T>(d)));
  Tensor<T> bias = gather(p.rel_bias, {h, n, n}, detail::relative_bias_index(queries.window, p.window, h));
  return softmax(add(logits, bias), -1);
}

/// Shared kernel: queries from `qsrc`, keys from `ksrc`, values from `vsrc`.
template <typename T>
WindowSet<T> windowed_attention(const WindowSet<T>& qsrc, const WindowSet<T>& ksrc, const WindowSet<T>& vsrc,
                                const AttentionParams<T>& p) {
  for (const WindowSet<T>* other : {&ksrc, &vsrc}) {
    if (other->windows.shape() != qsrc.windows.shape() || other->extents != qsrc.extents ||
        other->window != qsrc.window || other->shift != qsrc.shift) {
      throw ShapeError("window geometry mismatch: " + shape_str(qsrc.windows.shape()) + " vs " +
                       shape_str(other->windows.shape()));
    }
  }
  Tensor<T> attn = attention_map(qsrc, ksrc, p);
  const std::size_t nw = qsrc.num_windows(), n = qsrc.tokens_per_window(), C = qsrc.channels();
  Tensor<T> v = detail::split_heads(linear(vsrc.windows, p.wv, std::optional<Tensor<T>>(p.bv)), p.heads);
  Tensor<T> ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {nw, n, C});
  Tensor<T> out = linear(ctx, p.wo, std::optional<Tensor<T>>(p.bo));
  return WindowSet<T>{std::move(out), qsrc.extents, qsrc.window, qsrc.shift};
}

/// Windowed multi-head self-attention.
template <typename T>
WindowSet<T> w_msa(const WindowSet<T>& x, const AttentionParams<T>& p) {
  return windowed_attention(x, x, x, p);
}

/// Windowed multi-head cross-attention: Q and V from `feat_b`, K from `feat_a`
/// (V from `feat_a` when p.value_source == ValueSource::a).
template <typename T>
WindowSet<T> w_mca(const WindowSet<T>& feat_b, const WindowSet<T>& feat_a, const AttentionParams<T>& p) {
  return windowed_attention(feat_b, feat_a, p.value_source == ValueSource::b ? feat_b : feat_a, p);
}

// ---------------------------------------------------------------------------
// deformable operator

/// Depthwise-separable convolution over the channel concatenation of both streams,
/// emitting a 3-channel displacement per voxel.
template <typename T>
OffsetField<T> predict_offsets(const TokenGrid<T>& feat_a, const TokenGrid<T>& feat_b, const ConvKernel3D<T>& kernel) {
  if (feat_a.tensor.shape() != feat_b.tensor.shape()) {
    throw ShapeError("offset prediction needs aligned streams, got " + shape_str(feat_a.tensor.shape()) + " and " +
                     shape_str(feat_b.tensor.shape()));
  }
  if (kernel.out_channels() != 3) {
    throw ShapeError("offset kernel must emit 3 channels, emits " + std::to_string(kernel.out_channels()));
  }
  TokenGrid<T> both(concat<T>({feat_a.tensor, feat_b.tensor}, -1));
  return OffsetField<T>(depthwise_separable_conv3d(both, kernel).tensor);
}

/// The voxel-centre lattice as (x, y, z) coordinates, shape [D, H, W, 3].
template <typename T>
Tensor<T> identity_lattice(const std::array<std::size_t, 3>& ext) {
  const std::size_t D = ext[0], H = ext[1], W = ext[2];
  std::vector<T> c(D * H * W * 3);
  std::size_t o = 0;
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        c[o++] = static_cast<T>(x);
        c[o++] = static_cast<T>(y);
        c[o++] = static_cast<T>(z);
      }
  return Tensor<T>({D, H, W, 3}, std::move(c));
}

/// Resamples `feat_a` at (identity lattice + offset), borders clamped.
template <typename T>
TokenGrid<T> deform_features(const TokenGrid<T>& feat_a, const OffsetField<T>& off) {
  const Shape& os = off.tensor.shape();
  if (os[0] != feat_a.depth() || os[1] != feat_a.height() || os[2] != feat_a.width()) {
    throw ShapeError("offset field " + shape_str(os) + " does not match features " + shape_str(feat_a.tensor.shape()));
  }
  for (T v : off.tensor.data()) {
    if (!std::isfinite(v)) throw DomainError("non-finite offset");
  }
  return trilinear_sample(feat_a, add(identity_lattice<T>(feat_a.extents()), off.tensor));
}

/// Offsets from both streams warp stream a, then b queries the warped a inside (w, shift) windows.
template <typename T>
TokenGrid<T> deformable_cross_attention(const TokenGrid<T>& feat_a, const TokenGrid<T>& feat_b,
                                        const AttentionParams<T>& p, const ConvKernel3D<T>& kernel, std::size_t w,
                                        std::size_t shift) {
  OffsetField<T> off = predict_offsets(feat_a, feat_b, kernel);
  TokenGrid<T> warped = deform_features(feat_a, off);
  WindowSet<T> wb = window_partition(feat_b, w, shift);
  WindowSet<T> wa = window_partition(warped, w, shift);
  return window_reverse(w_mca(wb, wa, p));
}

/// The same pipeline with no deformation (fixed receptive field).
template <typename T>
TokenGrid<T> windowed_cross_attention(const TokenGrid<T>& feat_a, const TokenGrid<T>& feat_b,
                                      const AttentionParams<T>& p, std::size_t w, std::size_t shift) {
  if (feat_a.tensor.shape() != feat_b.tensor.shape()) {
    throw ShapeError("cross attention needs aligned streams, got " + shape_str(feat_a.tensor.shape()) + " and " +
                     shape_str(feat_b.tensor.shape()));
  }
  WindowSet<T> wb = window_partition(feat_b, w, shift);
  WindowSet<T> wa = window_partition(feat_a, w, shift);
  return window_reverse(w_mca(wb, wa, p));
}

}  // namespace micformer
