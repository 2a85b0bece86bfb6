// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference checks of every differentiable operation, in double precision.
//
// Each registered case builds random inputs and a function of them. The scalar under test is
// sum(f(inputs) * R) for a fixed random R, so every output element contributes. Error per
// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, kGradcheckFloor).

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "micformer/training.hpp"

namespace micformer {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckFloor = 1e-3;

struct GradcheckCase {
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> fn;
  std::size_t max_points = 40;  // coordinates probed per input tensor
};

using GradcheckFactory = std::function<GradcheckCase(Rng&)>;

struct GradcheckResult {
  std::string op;
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0;
  bool passed() const { return max_rel_error < kGradcheckTolerance; }
};

namespace gc {

inline Tensor<double> randn(Rng& rng, Shape shape, double sigma = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = sigma * rng.normal();
  return Tensor<double>(std::move(shape), std::move(d));
}

inline Tensor<double> rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(d));
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// Attention parameters occupy 9 consecutive inputs starting at `at`.
inline void push_attention(std::vector<Tensor<double>>& in, Rng& rng, std::size_t c, std::size_t heads, std::size_t w) {
  for (int i = 0; i < 4; ++i) {
    in.push_back(randn(rng, {c, c}, 0.5));
    in.push_back(randn(rng, {c}, 0.2));
  }
  const std::size_t span = 2 * w - 1;
  in.push_back(randn(rng, {span * span * span, heads}, 0.3));
}

inline AttentionParams<double> attention_from(const std::vector<Tensor<double>>& in, std::size_t at, std::size_t heads,
                                              std::size_t w, ValueSource vs = ValueSource::b) {
  AttentionParams<double> p;
  p.wq = in[at];
  p.bq = in[at + 1];
  p.wk = in[at + 2];
  p.bk = in[at + 3];
  p.wv = in[at + 4];
  p.bv = in[at + 5];
  p.wo = in[at + 6];
  p.bo = in[at + 7];
  p.rel_bias = in[at + 8];
  p.heads = heads;
  p.window = w;
  p.value_source = vs;
  return p;
}

/// Random lattice whose extents are multiples of `w`.
inline Shape lattice(Rng& rng, std::size_t w, std::size_t c) {
  return {w * pick(rng, 1, 2), w * pick(rng, 1, 2), w * pick(rng, 1, 2), c};
}

/// A tiny model with every parameter randomized so no path is trivially zero.
inline ModelConfig tiny_config(bool dual, bool deformable) {
  ModelConfig c;
  c.patch = 2;
  c.channels = 4;
  c.stages = 2;
  c.blocks = 1;
  c.window = 2;
  c.head_dim = 2;
  c.mlp_ratio = 2;
  c.classes = 3;
  c.final_channels = 2;
  c.dual_stream = dual;
  c.deformable = deformable;
  return c;
}

inline std::vector<Tensor<double>> random_params(const ModelConfig& cfg, Rng& rng) {
  std::vector<Tensor<double>> out;
  visit_parameters(cfg, [&](const std::string& name, const Shape& shape, Init init) {
    const double sigma = name.find(".offset.") != std::string::npos ? 0.2 : 0.4;
    Tensor<double> t = randn(rng, shape, sigma);
    if (init == Init::ones) t = add(t, Tensor<double>::scalar(1.0));
    out.push_back(t);
  });
  return out;
}

inline ParameterStore<double> store_from(const ModelConfig& cfg, const std::vector<Tensor<double>>& in, std::size_t at) {
  ParameterStore<double> ps;
  std::size_t i = at;
  visit_parameters(cfg, [&](const std::string& name, const Shape&, Init) { ps.add(name, in[i++]); });
  return ps;
}

}  // namespace gc

/// Registry of every differentiable operation, in report order.
inline const std::vector<std::pair<std::string, GradcheckFactory>>& gradcheck_registry() {
  using gc::pick;
  using gc::randn;
  using In = std::vector<Tensor<double>>;
  static const std::vector<std::pair<std::string, GradcheckFactory>> reg = {
      {"matmul",
       [](Rng& r) {
         const std::size_t b = pick(r, 1, 3), m = pick(r, 1, 4), k = pick(r, 1, 5), n = pick(r, 1, 4);
         const bool bcast = r.below(2) == 0;
         return GradcheckCase{{randn(r, {b, m, k}), bcast ? randn(r, {k, n}) : randn(r, {b, k, n})},
                              [](const In& x) { return matmul(x[0], x[1]); }};
       }},
      {"add",
       [](Rng& r) {
         const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
         const bool suffix = r.below(2) == 0;
         return GradcheckCase{{randn(r, s), suffix ? randn(r, {s[1]}) : randn(r, s)},
                              [](const In& x) { return add(x[0], x[1]); }};
       }},
      {"sub",
       [](Rng& r) {
         const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
         return GradcheckCase{{randn(r, s), randn(r, Shape{})}, [](const In& x) { return sub(x[0], x[1]); }};
       }},
      {"mul",
       [](Rng& r) {
         const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
         return GradcheckCase{{randn(r, s), randn(r, {s[1]})}, [](const In& x) { return mul(x[0], x[1]); }};
       }},
      {"scale",
       [](Rng& r) {
         const double c = r.uniform(-2, 2);
         return GradcheckCase{{randn(r, {pick(r, 1, 5), 3})}, [c](const In& x) { return scale(x[0], c); }};
       }},
      {"gelu",
       [](Rng& r) { return GradcheckCase{{randn(r, {pick(r, 2, 12)}, 2.0)}, [](const In& x) { return gelu(x[0]); }}; }},
      {"exp",
       [](Rng& r) { return GradcheckCase{{randn(r, {pick(r, 2, 12)})}, [](const In& x) { return exp(x[0]); }}; }},
      {"sqrt",
       [](Rng& r) {
         return GradcheckCase{{gc::rand_uniform(r, {pick(r, 2, 12)}, 0.2, 3.0)}, [](const In& x) { return sqrt(x[0]); }};
       }},
      {"reciprocal",
       [](Rng& r) {
         return GradcheckCase{{gc::rand_uniform(r, {pick(r, 2, 12)}, 0.3, 3.0)},
                              [](const In& x) { return reciprocal(x[0]); }};
       }},
      {"softmax",
       [](Rng& r) {
         const int axis = static_cast<int>(r.below(3));
         return GradcheckCase{{randn(r, {pick(r, 1, 3), pick(r, 2, 4), pick(r, 2, 4)}, 2.0)},
                              [axis](const In& x) { return softmax(x[0], axis); }};
       }},
      {"reduce_sum",
       [](Rng& r) {
         const int axis = static_cast<int>(r.below(3));
         return GradcheckCase{{randn(r, {pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)})},
                              [axis](const In& x) { return reduce(Reduce::sum, x[0], axis); }};
       }},
      {"reduce_mean",
       [](Rng& r) {
         const int axis = static_cast<int>(r.below(3));
         return GradcheckCase{{randn(r, {pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)})},
                              [axis](const In& x) { return reduce(Reduce::mean, x[0], axis); }};
       }},
      {"reduce_max",
       [](Rng& r) {
         const int axis = static_cast<int>(r.below(3));
         return GradcheckCase{{randn(r, {pick(r, 1, 3), pick(r, 2, 4), pick(r, 2, 4)})},
                              [axis](const In& x) { return reduce(Reduce::max, x[0], axis); }};
       }},
      {"sum_all", [](Rng& r) { return GradcheckCase{{randn(r, {3, pick(r, 1, 4)})}, [](const In& x) { return sum(x[0]); }}; }},
      {"mean_all",
       [](Rng& r) { return GradcheckCase{{randn(r, {3, pick(r, 1, 4)})}, [](const In& x) { return mean(x[0]); }}; }},
      {"reshape",
       [](Rng& r) {
         const std::size_t a = pick(r, 1, 4), b = pick(r, 1, 4);
         return GradcheckCase{{randn(r, {a, b, 2})}, [a, b](const In& x) { return reshape(x[0], {2, b, a}); }};
       }},
      {"gather",
       [](Rng& r) {
         const std::size_t n = pick(r, 2, 8), m = pick(r, 1, 12);
         std::vector<std::uint32_t> idx(m);
         for (auto& i : idx) i = static_cast<std::uint32_t>(r.below(n));
         IndexList il = std::make_shared<const std::vector<std::uint32_t>>(std::move(idx));
         return GradcheckCase{{randn(r, {n})}, [il, m](const In& x) { return gather(x[0], {m}, il); }};
       }},
      {"permute",
       [](Rng& r) {
         std::vector<std::size_t> axes{0, 1, 2, 3};
         r.shuffle(axes.begin(), axes.end());
         return GradcheckCase{{randn(r, {2, pick(r, 1, 3), 3, pick(r, 1, 2)})},
                              [axes](const In& x) { return permute(x[0], axes); }};
       }},
      {"concat",
       [](Rng& r) {
         const int axis = static_cast<int>(r.below(2));
         Shape a{2, 3}, b{2, 3};
         b[static_cast<std::size_t>(axis)] = pick(r, 1, 3);
         return GradcheckCase{{randn(r, a), randn(r, b)}, [axis](const In& x) { return concat<double>({x[0], x[1]}, axis); }};
       }},
      {"linear",
       [](Rng& r) {
         const std::size_t in = pick(r, 1, 5), out = pick(r, 1, 4);
         return GradcheckCase{{randn(r, {2, pick(r, 1, 3), in}), randn(r, {in, out}), randn(r, {out})},
                              [](const In& x) { return linear(x[0], x[1], std::optional<Tensor<double>>(x[2])); }};
       }},
      {"layer_norm",
       [](Rng& r) {
         const std::size_t c = pick(r, 2, 6);
         return GradcheckCase{{randn(r, {pick(r, 1, 4), c}, 2.0), randn(r, {c}), randn(r, {c})},
                              [](const In& x) { return layer_norm(x[0], x[1], x[2]); }};
       }},
      {"depthwise_conv3d",
       [](Rng& r) {
         const std::size_t k = r.below(2) ? 3 : 1, c = pick(r, 1, 3);
         return GradcheckCase{{randn(r, {pick(r, 1, 3), pick(r, 2, 3), pick(r, 1, 3), c}), randn(r, {k, k, k, c})},
                              [](const In& x) { return depthwise_conv3d(TokenGrid<double>(x[0]), x[1]).tensor; }};
       }},
      {"depthwise_separable_conv3d",
       [](Rng& r) {
         const std::size_t c = pick(r, 1, 3), o = pick(r, 1, 3);
         return GradcheckCase{{randn(r, {2, pick(r, 1, 3), 2, c}), randn(r, {3, 3, 3, c}), randn(r, {c, o}), randn(r, {o})},
                              [](const In& x) {
                                return depthwise_separable_conv3d(TokenGrid<double>(x[0]),
                                                                  ConvKernel3D<double>{x[1], x[2], x[3]})
                                    .tensor;
                              }};
       }},
      {"trilinear_sample",
       [](Rng& r) {
         const Shape g{pick(r, 2, 4), pick(r, 2, 4), pick(r, 2, 4), pick(r, 1, 2)};
         const std::size_t n = pick(r, 2, 6);
         // Interior points away from the integer lattice, where interpolation is smooth; one
         // coordinate per point may fall outside to exercise the clamped border.
         std::vector<double> c(n * 3);
         const std::size_t ext[3] = {g[2], g[1], g[0]};
         for (std::size_t i = 0; i < n; ++i) {
           for (std::size_t a = 0; a < 3; ++a) {
             const double cell = static_cast<double>(r.below(ext[a] - 1));
             c[i * 3 + a] = cell + r.uniform(0.1, 0.9);
           }
           if (r.below(3) == 0) c[i * 3 + r.below(3)] = r.below(2) ? -0.7 : 9.3;
         }
         return GradcheckCase{{randn(r, g), Tensor<double>({1, 1, n, 3}, std::move(c))},
                              [](const In& x) { return trilinear_sample(TokenGrid<double>(x[0]), x[1]).tensor; }};
       }},
      {"patch_embed",
       [](Rng& r) {
         const std::size_t p = pick(r, 1, 2), c = pick(r, 1, 3);
         return GradcheckCase{{randn(r, {2 * p, p, 2 * p}), randn(r, {p * p * p, c}), randn(r, {c})},
                              [p](const In& x) {
                                return patch_embed(x[0], p, x[1], std::optional<Tensor<double>>(x[2])).tensor;
                              }};
       }},
      {"patch_merge",
       [](Rng& r) {
         const std::size_t c = pick(r, 1, 2);
         return GradcheckCase{{randn(r, {2, 4, 2, c}), randn(r, {8 * c, 2 * c})},
                              [](const In& x) { return patch_merge(TokenGrid<double>(x[0]), x[1]).tensor; }};
       }},
      {"patch_expand",
       [](Rng& r) {
         const std::size_t c = 2 * pick(r, 1, 2);
         return GradcheckCase{{randn(r, {1, 2, 1, c}), randn(r, {c, 4 * c})},
                              [](const In& x) { return patch_expand(TokenGrid<double>(x[0]), x[1]).tensor; }};
       }},
      {"window_partition",
       [](Rng& r) {
         const std::size_t w = pick(r, 1, 2) * 2;
         const std::size_t shift = r.below(2) ? w / 2 : 0;
         return GradcheckCase{{randn(r, gc::lattice(r, w, 2))},
                              [w, shift](const In& x) { return window_partition(TokenGrid<double>(x[0]), w, shift).windows; }};
       }},
      {"w_msa",
       [](Rng& r) {
         const std::size_t w = 2, heads = pick(r, 1, 2), c = 2 * heads;
         const std::size_t shift = r.below(2) ? 1 : 0;
         In in{randn(r, gc::lattice(r, w, c))};
         gc::push_attention(in, r, c, heads, w);
         return GradcheckCase{in, [=](const In& x) {
                                return window_reverse(
                                           w_msa(window_partition(TokenGrid<double>(x[0]), w, shift),
                                                 gc::attention_from(x, 1, heads, w)))
                                    .tensor;
                              }};
       }},
      {"w_mca",
       [](Rng& r) {
         const std::size_t w = 2, heads = pick(r, 1, 2), c = 2 * heads;
         const Shape s = gc::lattice(r, w, c);
         const ValueSource vs = r.below(2) ? ValueSource::b : ValueSource::a;
         In in{randn(r, s), randn(r, s)};
         gc::push_attention(in, r, c, heads, w);
         return GradcheckCase{in, [=](const In& x) {
                                return window_reverse(w_mca(window_partition(TokenGrid<double>(x[0]), w, 1),
                                                            window_partition(TokenGrid<double>(x[1]), w, 1),
                                                            gc::attention_from(x, 2, heads, w, vs)))
                                    .tensor;
                              }};
       }},
      {"predict_offsets",
       [](Rng& r) {
         const std::size_t c = pick(r, 1, 2);
         const Shape s{2, pick(r, 1, 3), 2, c};
         return GradcheckCase{{randn(r, s), randn(r, s), randn(r, {3, 3, 3, 2 * c}), randn(r, {2 * c, 3}), randn(r, {3})},
                              [](const In& x) {
                                return predict_offsets(TokenGrid<double>(x[0]), TokenGrid<double>(x[1]),
                                                       ConvKernel3D<double>{x[2], x[3], x[4]})
                                    .tensor;
                              }};
       }},
      {"deformable_cross_attention",
       [](Rng& r) {
         const std::size_t w = 2, heads = pick(r, 1, 2), c = 2 * heads;
         const Shape s = gc::lattice(r, w, c);
         In in{randn(r, s), randn(r, s)};
         gc::push_attention(in, r, c, heads, w);
         in.push_back(randn(r, {3, 3, 3, 2 * c}, 0.3));
         in.push_back(randn(r, {2 * c, 3}, 0.5));
         in.push_back(randn(r, {3}, 0.5));
         return GradcheckCase{in, [=](const In& x) {
                                return deformable_cross_attention(TokenGrid<double>(x[0]), TokenGrid<double>(x[1]),
                                                                  gc::attention_from(x, 2, heads, w),
                                                                  ConvKernel3D<double>{x[11], x[12], x[13]}, w, 1)
                                    .tensor;
                              }};
       }},
      {"cross_entropy",
       [](Rng& r) {
         const std::size_t n = pick(r, 1, 6), k = pick(r, 2, 5);
         auto lab = std::make_shared<std::vector<std::uint8_t>>(n);
         for (auto& l : *lab) l = static_cast<std::uint8_t>(r.below(k));
         LabelBuffer lb = lab;
         return GradcheckCase{{randn(r, {n, k}, 2.0)}, [lb](const In& x) { return cross_entropy(x[0], lb); }};
       }},
      {"seg_loss",
       [](Rng& r) {
         const std::size_t k = pick(r, 2, 4);
         auto lab = std::make_shared<std::vector<std::uint8_t>>(8);
         for (auto& l : *lab) l = static_cast<std::uint8_t>(r.below(k));
         LabelBuffer lb = lab;
         return GradcheckCase{{randn(r, {2, 2, 2, k}, 2.0)}, [lb](const In& x) { return seg_loss(x[0], lb); }};
       }},
      {"swin_block",
       [](Rng& r) {
         ModelConfig cfg = gc::tiny_config(false, false);
         const std::size_t shift = r.below(2);
         In in{randn(r, {2, 2, 4, cfg.channels})};
         ParameterStore<double> probe = init_parameters<double>(cfg);
         for (const auto& [n, t] : probe.filter("enc0.blk0.swin_a.")) in.push_back(randn(r, t.shape(), 0.4));
         return GradcheckCase{in, [cfg, shift, probe](const In& x) {
                                ParameterStore<double> ps;
                                std::size_t i = 1;
                                for (const auto& [n, t] : probe.filter("enc0.blk0.swin_a.")) ps.add(n, x[i++]);
                                return swin_block(TokenGrid<double>(x[0]), ps, "enc0.blk0.swin_a", cfg, 2, 2, shift).tensor;
                              }, 20};
       }},
      {"cross_transformer_block",
       [](Rng& r) {
         ModelConfig cfg = gc::tiny_config(true, true);
         const Shape s{2, 2, 2, cfg.channels};
         In in{randn(r, s), randn(r, s)};
         ParameterStore<double> probe = init_parameters<double>(cfg).filter("enc0.blk0.cross.");
         for (const auto& [n, t] : probe) {
           in.push_back(n.find(".offset.") != std::string::npos ? randn(r, t.shape(), 0.2) : randn(r, t.shape(), 0.4));
         }
         return GradcheckCase{in, [cfg, probe](const In& x) {
                                ParameterStore<double> ps;
                                std::size_t i = 2;
                                for (const auto& [n, t] : probe) ps.add(n, x[i++]);
                                auto [a, b] = cross_transformer_block(TokenGrid<double>(x[0]), TokenGrid<double>(x[1]),
                                                                      ps, "enc0.blk0.cross", cfg, 2, 2, 1);
                                return concat<double>({a.tensor, b.tensor}, -1);
                              }, 16};
       }},
      {"micformer_forward",
       [](Rng& r) {
         ModelConfig cfg = gc::tiny_config(true, true);
         In in{randn(r, {8, 8, 8}), randn(r, {8, 8, 8})};
         for (auto& t : gc::random_params(cfg, r)) in.push_back(t);
         return GradcheckCase{in, [cfg](const In& x) {
                                return micformer_forward(x[0], x[1], gc::store_from(cfg, x, 2), cfg);
                              }, 3};
       }},
  };
  return reg;
}

/// Max relative error over probed coordinates of one case.
inline std::pair<double, std::size_t> gradcheck_case(const GradcheckCase& c, Rng& rng) {
  const Tensor<double> probe = c.fn(c.inputs);
  const Tensor<double> R = gc::randn(rng, probe.shape());
  auto objective = [&](const std::vector<Tensor<double>>& xs) { return sum(mul(c.fn(xs), R)); };

  auto tape = Tape<double>::create();
  std::vector<Tensor<double>> leaves;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) leaves.push_back(tape->leaf("in" + std::to_string(i), c.inputs[i]));
  const GradientMap<double> grads = tape->backward(objective(leaves));

  double worst = 0;
  std::size_t probed = 0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    const Tensor<double>& x = c.inputs[i];
    const auto analytic = grads.at("in" + std::to_string(i)).data();
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (coords.size() > c.max_points) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(c.max_points);
    }
    for (std::size_t k : coords) {
      auto eval_at = [&](double delta) {
        std::vector<double> d(x.data().begin(), x.data().end());
        d[k] += delta;
        std::vector<Tensor<double>> xs = c.inputs;
        xs[i] = Tensor<double>(x.shape(), std::move(d));
        return objective(xs).item();
      };
      const double numeric = (eval_at(kGradcheckStep) - eval_at(-kGradcheckStep)) / (2 * kGradcheckStep);
      const double a = analytic[k];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradcheckFloor});
      worst = std::max(worst, err);
      ++probed;
    }
  }
  return {worst, probed};
}

inline std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> out;
  for (const auto& [n, f] : gradcheck_registry()) out.push_back(n);
  return out;
}

inline GradcheckResult gradcheck_op(const std::string& op, std::size_t trials, std::uint64_t seed) {
  for (const auto& [name, factory] : gradcheck_registry()) {
    if (name != op) continue;
    GradcheckResult res;
    res.op = name;
    Rng rng(derive_seed(seed, hash_name(name)));
    for (std::size_t t = 0; t < trials; ++t) {
      const GradcheckCase c = factory(rng);
      auto [err, n] = gradcheck_case(c, rng);
      res.max_rel_error = std::max(res.max_rel_error, err);
      res.coordinates += n;
      ++res.trials;
    }
    return res;
  }
  throw ConfigError("unknown op '" + op + "'");
}

inline std::vector<GradcheckResult> gradcheck_all(std::size_t trials, std::uint64_t seed) {
  std::vector<GradcheckResult> out;
  for (const auto& name : gradcheck_ops()) out.push_back(gradcheck_op(name, trials, seed));
  return out;
}

}  // namespace micformer
