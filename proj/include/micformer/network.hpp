// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// Dual-stream U-shaped segmentation network.
//
// Stream a carries CT, stream b carries MRI. Each stream is its own U-net of windowed
// transformer blocks; after every pair of per-stream Swin blocks a Cross Transformer block lets
// the streams query each other (b queries a, then a queries the updated b). The two
// full-resolution decoder outputs are concatenated and projected to class logits.
//
// Parameter names are the contract between init_parameters(), the forward pass and the
// checkpoint format; they are built only by the helpers in this file.

#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "micformer/attention.hpp"
#include "micformer/io.hpp"
#include "micformer/rng.hpp"

namespace micformer {

struct ModelConfig {
  std::size_t patch = 4;
  std::size_t channels = 24;  // stage-0 width; doubles per stage
  std::size_t stages = 3;
  std::size_t blocks = 1;  // (Swin, Cross) pairs per stage, encoder and decoder
  std::size_t window = 4;
  std::size_t head_dim = 8;  // heads = channels / head_dim
  std::size_t mlp_ratio = 4;
  std::size_t classes = 8;
  std::size_t final_channels = 8;  // per-stream width at full resolution
  ValueSource value_source = ValueSource::b;
  bool dual_stream = true;  // false: CT-only single-stream ablation
  bool deformable = true;  // false: offsets fixed at zero (plain windowed cross-attention)
  bool decoder_cross = true;
  std::uint64_t seed = 0;

  std::size_t channels_at(std::size_t stage) const { return channels << stage; }
  std::size_t heads_at(std::size_t stage) const { return channels_at(stage) / head_dim; }

  /// Window edge used on a lattice: the configured edge, capped by the lattice itself.
  std::size_t window_for(std::size_t lattice_edge) const { return std::min(window, lattice_edge); }

  /// Lattice edge at a stage for a cubic input of edge `edge`.
  std::size_t lattice_at(std::size_t edge, std::size_t stage) const { return edge / (patch << stage); }

  void validate() const {
    if (patch == 0 || channels == 0 || stages == 0 || blocks == 0 || window == 0 || head_dim == 0 || mlp_ratio == 0 ||
        final_channels == 0) {
      throw ConfigError("model sizes must be positive");
    }
    if (classes < 2 || classes > 255) throw ConfigError("class count must be in [2, 255]");
    if (channels % head_dim) throw ConfigError("head_dim must divide the channel count at every stage");
  }

  /// Checks that a cubic input of edge `edge` fits every stage's patch and window divisibility.
  void validate_input(std::size_t edge) const {
    validate();
    const std::size_t unit = patch << (stages - 1);
    if (edge % unit) {
      throw ShapeError("input edge " + std::to_string(edge) + " must be divisible by patch*2^(stages-1) = " +
                       std::to_string(unit));
    }
    for (std::size_t s = 0; s < stages; ++s) {
      const std::size_t l = lattice_at(edge, s);
      const std::size_t w = window_for(l);
      if (l % w) {
        throw ShapeError("stage " + std::to_string(s) + " lattice " + std::to_string(l) + " not divisible by window " +
                         std::to_string(w));
      }
    }
  }

  /// Smallest multiple that input extents must be padded to.
  std::size_t input_multiple() const { return patch << (stages - 1); }
};

// ---------------------------------------------------------------------------

/// Named learnable tensors in deterministic insertion order.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  void set(const std::string& name, Tensor<T> t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    if (entries_[it->second].second.shape() != t.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(entries_[it->second].second.shape()) +
                       ", replacement has " + shape_str(t.shape()));
    }
    entries_[it->second].second = std::move(t);
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
    return entries_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : entries_) out.push_back(n);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  /// Copy whose tensors are leaves on `tape`, so backward() reports gradients by name.
  ParameterStore bind(const std::shared_ptr<Tape<T>>& tape) const {
    ParameterStore out;
    for (const auto& [n, t] : entries_) out.add(n, tape->leaf(n, t));
    return out;
  }

  /// Entries whose name starts with `prefix`.
  ParameterStore filter(const std::string& prefix) const {
    ParameterStore out;
    for (const auto& [n, t] : entries_) {
      if (n.rfind(prefix, 0) == 0) out.add(n, t);
    }
    return out;
  }

  bool operator==(const ParameterStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != o.entries_[i].first || !entries_[i].second.same_values(o.entries_[i].second)) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// parameter layout

enum class Init { trunc_normal, zeros, ones };

/// Receives (name, shape, init) for every parameter of the architecture, in a fixed order.
using ParamVisitor = std::function<void(const std::string&, const Shape&, Init)>;

namespace layout {

inline void norm(const ParamVisitor& v, const std::string& p, std::size_t c) {
  v(p + ".gamma", {c}, Init::ones);
  v(p + ".beta", {c}, Init::zeros);
}

inline void attention(const ParamVisitor& v, const std::string& p, std::size_t c, std::size_t heads, std::size_t window) {
  for (const char* m : {"q", "k", "v"}) {
    v(p + ".w" + m, {c, c}, Init::trunc_normal);
    v(p + ".b" + m, {c}, Init::zeros);
  }
  v(p + ".wo", {c, c}, Init::zeros);
  v(p + ".bo", {c}, Init::zeros);
  const std::size_t span = 2 * window - 1;
  v(p + ".rel_bias", {span * span * span, heads}, Init::zeros);
}

inline void mlp(const ParamVisitor& v, const std::string& p, std::size_t c, std::size_t ratio) {
  v(p + ".fc1.w", {c, ratio * c}, Init::trunc_normal);
  v(p + ".fc1.b", {ratio * c}, Init::zeros);
  v(p + ".fc2.w", {ratio * c, c}, Init::zeros);
  v(p + ".fc2.b", {c}, Init::zeros);
}

/// The depthwise stage starts random and the pointwise stage at zero, so offsets are exactly
/// zero at initialization but the pointwise weights still receive gradient.
inline void offset_kernel(const ParamVisitor& v, const std::string& p, std::size_t c) {
  v(p + ".dw", {3, 3, 3, 2 * c}, Init::trunc_normal);
  v(p + ".pw", {2 * c, 3}, Init::zeros);
  v(p + ".pb", {3}, Init::zeros);
}

inline void swin_block(const ParamVisitor& v, const std::string& p, const ModelConfig& cfg, std::size_t c,
                       std::size_t heads) {
  norm(v, p + ".norm1", c);
  attention(v, p + ".attn", c, heads, cfg.window);
  norm(v, p + ".norm2", c);
  mlp(v, p + ".mlp", c, cfg.mlp_ratio);
}

inline void cross_phase(const ParamVisitor& v, const std::string& p, const ModelConfig& cfg, std::size_t c,
                        std::size_t heads) {
  norm(v, p + ".norm_key", c);
  norm(v, p + ".norm_query", c);
  attention(v, p + ".attn", c, heads, cfg.window);
  if (cfg.deformable) offset_kernel(v, p + ".offset", c);
  norm(v, p + ".norm2", c);
  mlp(v, p + ".mlp", c, cfg.mlp_ratio);
}

inline void stage_blocks(const ParamVisitor& v, const std::string& p, const ModelConfig& cfg, std::size_t c,
                         std::size_t heads, bool cross) {
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string bp = p + ".blk" + std::to_string(i);
    swin_block(v, bp + ".swin_a", cfg, c, heads);
    if (!cfg.dual_stream) continue;
    swin_block(v, bp + ".swin_b", cfg, c, heads);
    if (cross) {
      cross_phase(v, bp + ".cross.p1", cfg, c, heads);
      cross_phase(v, bp + ".cross.p2", cfg, c, heads);
    }
  }
}

}  // namespace layout

/// Visits every parameter of the architecture described by `cfg`.
inline void visit_parameters(const ModelConfig& cfg, const ParamVisitor& v) {
  cfg.validate();
  const std::size_t p3 = cfg.patch * cfg.patch * cfg.patch;
  std::vector<std::string> streams = {"a"};
  if (cfg.dual_stream) streams.push_back("b");
  for (const auto& s : streams) {
    v("embed_" + s + ".w", {p3, cfg.channels}, Init::trunc_normal);
    v("embed_" + s + ".b", {cfg.channels}, Init::zeros);
  }
  for (std::size_t st = 0; st < cfg.stages; ++st) {
    const std::size_t c = cfg.channels_at(st);
    const std::string sp = "enc" + std::to_string(st);
    layout::stage_blocks(v, sp, cfg, c, cfg.heads_at(st), true);
    if (st + 1 < cfg.stages) {
      for (const auto& s : streams) v(sp + ".merge_" + s + ".w", {8 * c, 2 * c}, Init::trunc_normal);
    }
  }
  for (std::size_t st = cfg.stages - 1; st-- > 0;) {
    const std::size_t c = cfg.channels_at(st);
    const std::string sp = "dec" + std::to_string(st);
    for (const auto& s : streams) v(sp + ".expand_" + s + ".w", {2 * c, 8 * c}, Init::trunc_normal);
    layout::stage_blocks(v, sp, cfg, c, cfg.heads_at(st), cfg.decoder_cross);
  }
  for (const auto& s : streams) {
    v("final_" + s + ".w", {cfg.channels, p3 * cfg.final_channels}, Init::trunc_normal);
  }
  v("head.w", {streams.size() * cfg.final_channels, cfg.classes}, Init::trunc_normal);
  v("head.b", {cfg.classes}, Init::zeros);
}

/// Deterministic initialization: each tensor draws from its own generator seeded by (seed, name),
/// truncated normal with sigma 0.02 where random.
template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& cfg) {
  ParameterStore<T> store;
  visit_parameters(cfg, [&](const std::string& name, const Shape& shape, Init init) {
    std::vector<T> data(shape_numel(shape), T(0));
    if (init == Init::ones) std::fill(data.begin(), data.end(), T(1));
    if (init == Init::trunc_normal) {
      Rng rng(derive_seed(cfg.seed, hash_name(name)));
      for (auto& x : data) x = static_cast<T>(rng.truncated_normal(0.02));
    }
    store.add(name, Tensor<T>(shape, std::move(data)));
  });
  return store;
}

/// Zeroes every residual-branch output (attention and MLP output projections) and the offset
/// kernels whose names start with `prefix`, making those blocks exact identities.
template <typename T>
void zero_residual_branches(ParameterStore<T>& store, const std::string& prefix = "") {
  for (const auto& name : store.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const bool branch_out = name.ends_with(".attn.wo") || name.ends_with(".attn.bo") || name.ends_with(".fc2.w") ||
                            name.ends_with(".fc2.b");
    const bool offset = name.find(".offset.") != std::string::npos;
    if (branch_out || offset) store.set(name, Tensor<T>::zeros(store.get(name).shape()));
  }
}

// ---------------------------------------------------------------------------
// blocks

template <typename T>
AttentionParams<T> attention_params(const ParameterStore<T>& ps, const std::string& p, std::size_t heads,
                                    const ModelConfig& cfg) {
  AttentionParams<T> a;
  a.wq = ps.get(p + ".wq");
  a.bq = ps.get(p + ".bq");
  a.wk = ps.get(p + ".wk");
  a.bk = ps.get(p + ".bk");
  a.wv = ps.get(p + ".wv");
  a.bv = ps.get(p + ".bv");
  a.wo = ps.get(p + ".wo");
  a.bo = ps.get(p + ".bo");
  a.rel_bias = ps.get(p + ".rel_bias");
  a.heads = heads;
  a.window = cfg.window;
  a.value_source = cfg.value_source;
  return a;
}

template <typename T>
ConvKernel3D<T> offset_kernel(const ParameterStore<T>& ps, const std::string& p) {
  return ConvKernel3D<T>{ps.get(p + ".dw"), ps.get(p + ".pw"), ps.get(p + ".pb")};
}

template <typename T>
TokenGrid<T> norm(const TokenGrid<T>& x, const ParameterStore<T>& ps, const std::string& p) {
  return TokenGrid<T>(layer_norm(x.tensor, ps.get(p + ".gamma"), ps.get(p + ".beta")));
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const ParameterStore<T>& ps, const std::string& p) {
  Tensor<T> h = gelu(linear(x, ps.get(p + ".fc1.w"), std::optional<Tensor<T>>(ps.get(p + ".fc1.b"))));
  return linear(h, ps.get(p + ".fc2.w"), std::optional<Tensor<T>>(ps.get(p + ".fc2.b")));
}

/// Pre-norm transformer block: x + W-MSA(norm(x)), then x + MLP(norm(x)).
template <typename T>
TokenGrid<T> swin_block(const TokenGrid<T>& x, const ParameterStore<T>& ps, const std::string& p,
                        const ModelConfig& cfg, std::size_t heads, std::size_t window, std::size_t shift) {
  const AttentionParams<T> ap = attention_params(ps, p + ".attn", heads, cfg);
  WindowSet<T> ws = window_partition(norm(x, ps, p + ".norm1"), window, shift);
  Tensor<T> h = add(x.tensor, window_reverse(w_msa(ws, ap)).tensor);
  Tensor<T> y = add(h, mlp(norm(TokenGrid<T>(h), ps, p + ".norm2").tensor, ps, p + ".mlp"));
  return TokenGrid<T>(std::move(y));
}

/// One communication phase: `query` attends to (deformed) `key`, residual, then residual MLP.
template <typename T>
TokenGrid<T> cross_phase(const TokenGrid<T>& key, const TokenGrid<T>& query, const ParameterStore<T>& ps,
                         const std::string& p, const ModelConfig& cfg, std::size_t heads, std::size_t window,
                         std::size_t shift) {
  const AttentionParams<T> ap = attention_params(ps, p + ".attn", heads, cfg);
  TokenGrid<T> nk = norm(key, ps, p + ".norm_key");
  TokenGrid<T> nq = norm(query, ps, p + ".norm_query");
  TokenGrid<T> att = cfg.deformable
                         ? deformable_cross_attention(nk, nq, ap, offset_kernel(ps, p + ".offset"), window, shift)
                         : windowed_cross_attention(nk, nq, ap, window, shift);
  Tensor<T> h = add(query.tensor, att.tensor);
  Tensor<T> y = add(h, mlp(norm(TokenGrid<T>(h), ps, p + ".norm2").tensor, ps, p + ".mlp"));
  return TokenGrid<T>(std::move(y));
}

/// Two sequential phases: b queries a; then a queries the already-updated b.
template <typename T>
std::pair<TokenGrid<T>, TokenGrid<T>> cross_transformer_block(const TokenGrid<T>& a, const TokenGrid<T>& b,
                                                              const ParameterStore<T>& ps, const std::string& p,
                                                              const ModelConfig& cfg, std::size_t heads,
                                                              std::size_t window, std::size_t shift) {
  if (a.tensor.shape() != b.tensor.shape()) {
    throw ShapeError("cross block streams differ: " + shape_str(a.tensor.shape()) + " vs " + shape_str(b.tensor.shape()));
  }
  TokenGrid<T> b1 = cross_phase(a, b, ps, p + ".p1", cfg, heads, window, shift);
  TokenGrid<T> a1 = cross_phase(b1, a, ps, p + ".p2", cfg, heads, window, shift);
  return {std::move(a1), std::move(b1)};
}

template <typename T>
TokenGrid<T> seg_head(const TokenGrid<T>& fused, const ParameterStore<T>& ps) {
  return TokenGrid<T>(linear(fused.tensor, ps.get("head.w"), std::optional<Tensor<T>>(ps.get("head.b"))));
}

// ---------------------------------------------------------------------------
// forward

namespace detail {

template <typename T>
void run_stage_blocks(TokenGrid<T>& a, std::optional<TokenGrid<T>>& b, const ParameterStore<T>& ps,
                      const std::string& prefix, const ModelConfig& cfg, std::size_t stage, bool cross) {
  const std::size_t heads = cfg.heads_at(stage);
  const std::size_t w = cfg.window_for(std::min({a.depth(), a.height(), a.width()}));
  std::size_t application = 0;
  auto next_shift = [&] { return (application++ % 2) ? w / 2 : 0; };
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string bp = prefix + ".blk" + std::to_string(i);
    const std::size_t shift = next_shift();
    a = swin_block(a, ps, bp + ".swin_a", cfg, heads, w, shift);
    if (b) *b = swin_block(*b, ps, bp + ".swin_b", cfg, heads, w, shift);
    if (b && cross) {
      auto [na, nb] = cross_transformer_block(a, *b, ps, bp + ".cross", cfg, heads, w, next_shift());
      a = std::move(na);
      *b = std::move(nb);
    }
  }
}

/// Full-resolution features of both streams. With `cross` false the streams never interact.
template <typename T>
std::pair<TokenGrid<T>, std::optional<TokenGrid<T>>> stream_features(const Tensor<T>& ct, const Tensor<T>* mri,
                                                                     const ParameterStore<T>& ps,
                                                                     const ModelConfig& cfg, bool cross) {
  if (ct.rank() != 3 || ct.shape()[0] != ct.shape()[1] || ct.shape()[1] != ct.shape()[2]) {
    throw ShapeError("inputs must be cubic [E,E,E] volumes, got " + shape_str(ct.shape()));
  }
  cfg.validate_input(ct.shape()[0]);
  if (mri && mri->shape() != ct.shape()) {
    throw ShapeError("modalities differ in extents: " + shape_str(ct.shape()) + " vs " + shape_str(mri->shape()));
  }
  auto embed = [&](const Tensor<T>& v, const std::string& s) {
    return patch_embed(v, cfg.patch, ps.get("embed_" + s + ".w"), std::optional<Tensor<T>>(ps.get("embed_" + s + ".b")));
  };
  TokenGrid<T> a = embed(ct, "a");
  std::optional<TokenGrid<T>> b;
  if (mri) b = embed(*mri, "b");

  std::vector<TokenGrid<T>> skip_a;
  std::vector<std::optional<TokenGrid<T>>> skip_b;
  for (std::size_t st = 0; st < cfg.stages; ++st) {
    const std::string sp = "enc" + std::to_string(st);
    run_stage_blocks(a, b, ps, sp, cfg, st, cross);
    skip_a.push_back(a);
    skip_b.push_back(b);
    if (st + 1 < cfg.stages) {
      a = patch_merge(a, ps.get(sp + ".merge_a.w"));
      if (b) *b = patch_merge(*b, ps.get(sp + ".merge_b.w"));
    }
  }
  for (std::size_t st = cfg.stages - 1; st-- > 0;) {
    const std::string sp = "dec" + std::to_string(st);
    a = TokenGrid<T>(add(patch_expand(a, ps.get(sp + ".expand_a.w")).tensor, skip_a[st].tensor));
    if (b) *b = TokenGrid<T>(add(patch_expand(*b, ps.get(sp + ".expand_b.w")).tensor, skip_b[st]->tensor));
    run_stage_blocks(a, b, ps, sp, cfg, st, cross && cfg.decoder_cross);
  }
  a = patch_expand_by(a, ps.get("final_a.w"), cfg.patch);
  if (b) *b = patch_expand_by(*b, ps.get("final_b.w"), cfg.patch);
  return {std::move(a), std::move(b)};
}

}  // namespace detail

/// Logits [E, E, E, classes] for a pre-aligned, normalized CT/MRI pair of cubic volumes.
/// With cfg.dual_stream false the MRI input is ignored (CT-only ablation).
template <typename T>
Tensor<T> micformer_forward(const Tensor<T>& ct, const Tensor<T>& mri, const ParameterStore<T>& ps,
                            const ModelConfig& cfg) {
  auto [a, b] = detail::stream_features(ct, cfg.dual_stream ? &mri : nullptr, ps, cfg, true);
  TokenGrid<T> fused = b ? TokenGrid<T>(concat<T>({a.tensor, b->tensor}, -1)) : a;
  return seg_head(fused, ps).tensor;
}

/// Full-resolution features of one stream run on its own, with no cross-stream blocks.
/// `stream` is "a" (CT) or "b" (MRI).
template <typename T>
TokenGrid<T> single_stream_features(const Tensor<T>& volume, const std::string& stream, const ParameterStore<T>& ps,
                                    const ModelConfig& cfg) {
  if (stream != "a" && stream != "b") throw ConfigError("stream must be 'a' or 'b'");
  // Run stream b through the a-slot by renaming its parameters.
  if (stream == "a") {
    ModelConfig single = cfg;
    single.dual_stream = false;
    return detail::stream_features<T>(volume, nullptr, ps, single, false).first;
  }
  ParameterStore<T> renamed;
  for (const auto& [name, t] : ps) {
    std::string n = name;
    for (const auto& [from, to] : std::vector<std::pair<std::string, std::string>>{
             {".swin_b.", ".swin_a."}, {"embed_b.", "embed_a."}, {".merge_b.", ".merge_a."},
             {".expand_b.", ".expand_a."}, {"final_b.", "final_a."}}) {
      if (auto pos = n.find(from); pos != std::string::npos) n.replace(pos, from.size(), to);
    }
    if (n != name) renamed.add(n, t);
  }
  ModelConfig single = cfg;
  single.dual_stream = false;
  return detail::stream_features<T>(volume, nullptr, renamed, single, false).first;
}

// ---------------------------------------------------------------------------
// config text

inline std::string to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "patch = " << c.patch << '\n'
     << "channels = " << c.channels << '\n'
     << "stages = " << c.stages << '\n'
     << "blocks = " << c.blocks << '\n'
     << "window = " << c.window << '\n'
     << "head_dim = " << c.head_dim << '\n'
     << "mlp_ratio = " << c.mlp_ratio << '\n'
     << "classes = " << c.classes << '\n'
     << "final_channels = " << c.final_channels << '\n'
     << "value_source = " << to_string(c.value_source) << '\n'
     << "modality = " << (c.dual_stream ? "dual" : "ct_only") << '\n'
     << "deformable = " << (c.deformable ? "true" : "false") << '\n'
     << "decoder_cross = " << (c.decoder_cross ? "true" : "false") << '\n'
     << "seed = " << c.seed << '\n';
  return os.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Parses `key = value` lines; '#' starts a comment. Duplicate keys are errors.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("duplicate key '" + key + "'");
  }
  return kv;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto x = std::stoull(v, &used);
    if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Applies one model key; returns false if the key is not a model key.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_uint;
  if (key == "patch") c.patch = parse_uint(key, v);
  else if (key == "channels") c.channels = parse_uint(key, v);
  else if (key == "stages") c.stages = parse_uint(key, v);
  else if (key == "blocks") c.blocks = parse_uint(key, v);
  else if (key == "window") c.window = parse_uint(key, v);
  else if (key == "head_dim") c.head_dim = parse_uint(key, v);
  else if (key == "mlp_ratio") c.mlp_ratio = parse_uint(key, v);
  else if (key == "classes") c.classes = parse_uint(key, v);
  else if (key == "final_channels") c.final_channels = parse_uint(key, v);
  else if (key == "value_source") c.value_source = parse_value_source(v);
  else if (key == "modality") {
    if (v != "dual" && v != "ct_only") throw ConfigError("modality must be 'dual' or 'ct_only', got '" + v + "'");
    c.dual_stream = v == "dual";
  } else if (key == "deformable") c.deformable = detail::parse_bool(key, v);
  else if (key == "decoder_cross") c.decoder_cross = detail::parse_bool(key, v);
  else if (key == "seed") c.seed = parse_uint(key, v);
  else return false;
  return true;
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  for (const auto& [k, v] : detail::parse_key_values(text)) {
    if (!apply_model_key(c, k, v)) throw ConfigError("unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// checkpoints
//
//   "MICF" | u32 version (1) | u32 config length | config text | u32 tensor count
//   | per tensor: u32 name length, name, u8 dtype (0 f32, 1 f64), u8 rank, u32 extents..., raw values
//   | u32 CRC-32 of all preceding bytes
//
// All integers and values little-endian.

namespace checkpoint {
inline constexpr char kMagic[4] = {'M', 'I', 'C', 'F'};
inline constexpr std::uint32_t kVersion = 1;
}  // namespace checkpoint

template <typename T>
struct Checkpoint {
  std::string config_text;
  ParameterStore<T> params;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<T>& store, const std::string& config_text) {
  std::vector<std::uint8_t> out(checkpoint::kMagic, checkpoint::kMagic + 4);
  detail::put_le<std::uint32_t>(out, checkpoint::kVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_text.size()));
  out.insert(out.end(), config_text.begin(), config_text.end());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(std::is_same_v<T, float> ? 0 : 1);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (T v : t.data()) detail::put_le<T>(out, v);
  }
  detail::finish_crc(out);
  return out;
}

/// Decodes a checkpoint; stored values are converted to T if the archive used the other precision.
template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), checkpoint::kMagic, 4) != 0) {
    throw FormatError("bad magic: not a MICF checkpoint");
  }
  if (bytes.size() < 16) throw FormatError("truncated checkpoint");
  const std::size_t body = bytes.size() - 4;
  if (detail::get_le<std::uint32_t>(bytes.data() + body) != detail::crc32_of(bytes.data(), body)) {
    throw FormatError("checkpoint checksum mismatch");
  }
  std::size_t pos = 4;
  auto need = [&](std::size_t n) {
    if (pos + n > body) throw FormatError("truncated checkpoint record");
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    return v;
  };
  const std::uint32_t version = u32();
  if (version != checkpoint::kVersion) throw FormatError("unknown checkpoint version " + std::to_string(version));
  Checkpoint<T> ck;
  const std::uint32_t clen = u32();
  need(clen);
  ck.config_text.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + clen));
  pos += clen;
  const std::uint32_t count = u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = u32();
    need(nlen + 2);
    std::string name(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + nlen));
    pos += nlen;
    const std::uint8_t dtype = bytes[pos++];
    const std::uint8_t rank = bytes[pos++];
    if (dtype > 1) throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for '" + name + "'");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(u32());
    const std::size_t n = shape_numel(shape);
    const std::size_t elem = dtype == 0 ? 4 : 8;
    need(n * elem);
    std::vector<T> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::uint8_t* p = bytes.data() + pos + k * elem;
      data[k] = dtype == 0 ? static_cast<T>(detail::get_le<float>(p)) : static_cast<T>(detail::get_le<double>(p));
    }
    pos += n * elem;
    ck.params.add(name, Tensor<T>(std::move(shape), std::move(data)));
  }
  if (pos != body) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

template <typename T>
void save_params(const ParameterStore<T>& store, const std::filesystem::path& path, const std::string& config_text = "") {
  detail::write_file_atomic(path, encode_checkpoint(store, config_text));
}

template <typename T>
Checkpoint<T> load_params(const std::filesystem::path& path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace micformer
