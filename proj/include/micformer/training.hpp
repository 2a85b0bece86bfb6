// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// Loss, Adam, the training loop and evaluation.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "micformer/metrics.hpp"
#include "micformer/network.hpp"

namespace micformer {

// ---------------------------------------------------------------------------
// loss

using LabelBuffer = std::shared_ptr<const std::vector<std::uint8_t>>;

/// Mean voxel cross-entropy of logits [..., K] against one class index per row.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelBuffer& labels) {
  if (logits.rank() < 1) throw ShapeError("cross_entropy needs logits of rank >= 1");
  const std::size_t K = logits.shape().back();
  const std::size_t N = logits.numel() / K;
  if (!labels || labels->size() != N) {
    throw ShapeError("cross_entropy: " + std::to_string(N) + " logit rows but " +
                     std::to_string(labels ? labels->size() : 0) + " labels");
  }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  const T* x = logits.data().data();
  T total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t lab = (*labels)[i];
    if (lab >= K) throw DomainError("label " + std::to_string(lab) + " outside [0, " + std::to_string(K) + ")");
    const T* row = x + i * K;
    T mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T e = std::exp(row[k] - mx);
      (*probs)[i * K + k] = e;
      s += e;
    }
    for (std::size_t k = 0; k < K; ++k) (*probs)[i * K + k] /= s;
    total += mx + std::log(s) - row[lab];
  }
  std::shared_ptr<const std::vector<T>> p = probs;
  return detail::finish<T>(OpKind::cross_entropy, Shape{}, {total / static_cast<T>(N)}, {&logits},
                           [p, labels, N, K](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             T* gx = gi[0]->data();
                             const T c = g[0] / static_cast<T>(N);
                             for (std::size_t i = 0; i < N; ++i) {
                               for (std::size_t k = 0; k < K; ++k) gx[i * K + k] += c * (*p)[i * K + k];
                               gx[i * K + (*labels)[i]] -= c;
                             }
                           });
}

struct LossWeights {
  double ce = 1.0;
  double dice = 1.0;
  double smooth = 1.0;  // added to numerator and denominator of each soft Dice
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> ce;
  Tensor<T> dice;  // 1 - mean foreground soft Dice
};

template <typename T>
LossTerms<T> seg_loss_terms(const Tensor<T>& logits, const LabelBuffer& labels, const LossWeights& w = {}) {
  if (logits.rank() < 1) throw ShapeError("seg_loss needs logits of rank >= 1");
  const std::size_t K = logits.shape().back();
  if (K < 2) throw ShapeError("seg_loss needs at least 2 classes");
  const std::size_t N = logits.numel() / K;
  Tensor<T> ce = cross_entropy(logits, labels);

  std::vector<T> onehot(N * K, T(0)), gsum(K, T(w.smooth));
  for (std::size_t i = 0; i < N; ++i) {
    onehot[i * K + (*labels)[i]] = T(1);
    gsum[(*labels)[i]] += T(1);
  }
  Tensor<T> p = reshape(softmax(logits, -1), {N, K});
  Tensor<T> inter = reduce(Reduce::sum, mul(p, Tensor<T>({N, K}, std::move(onehot))), 0);
  Tensor<T> psum = reduce(Reduce::sum, p, 0);
  Tensor<T> num = add(scale(inter, T(2)), Tensor<T>::full({K}, T(w.smooth)));
  Tensor<T> den = add(psum, Tensor<T>({K}, std::move(gsum)));
  Tensor<T> per_class = mul(num, reciprocal(den));
  std::vector<std::uint32_t> fg(K - 1);
  for (std::size_t k = 1; k < K; ++k) fg[k - 1] = static_cast<std::uint32_t>(k);
  Tensor<T> mean_fg = mean(gather(per_class, {K - 1}, std::make_shared<const std::vector<std::uint32_t>>(std::move(fg))));
  Tensor<T> dice_loss = sub(Tensor<T>::scalar(T(1)), mean_fg);
  Tensor<T> total = add(scale(ce, T(w.ce)), scale(dice_loss, T(w.dice)));
  return {total, ce, dice_loss};
}

/// Cross-entropy plus (1 - mean soft Dice over foreground classes).
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const LabelBuffer& labels, const LossWeights& w = {}) {
  return seg_loss_terms(logits, labels, w).total;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct OptimState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

/// One bias-corrected Adam update of every parameter.
template <typename T>
void adam_step(ParameterStore<T>& params, const GradientMap<T>& grads, OptimState<T>& st) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw AutodiffError("no gradient for parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_str(it->second.shape()) + ", parameter has " +
                       shape_str(p.shape()));
    }
  }
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw AutodiffError("gradient for unknown parameter '" + name + "'");
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (const auto& name : params.names()) {
    const Tensor<T>& p = params.get(name);
    auto g = grads.at(name).data();
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(p.numel(), T(0));
    if (v.empty()) v.assign(p.numel(), T(0));
    std::vector<T> out(p.data().begin(), p.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double gi = g[i];
      const double mi = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      out[i] = static_cast<T>(out[i] - st.lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps));
    }
    params.set(name, Tensor<T>(p.shape(), std::move(out)));
  }
}

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  ModelConfig model;
  std::size_t edge = 64;
  double lr = 1e-4;
  std::size_t epochs = 100;
  std::size_t max_iterations = 0;  // 0: no cap
  std::size_t checkpoint_every = 10;
  std::size_t validate_every = 1;  // 0: never
  LossWeights loss;
};

inline std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << to_text(c.model) << std::setprecision(17) << "edge = " << c.edge << '\n'
     << "lr = " << c.lr << '\n'
     << "epochs = " << c.epochs << '\n'
     << "max_iterations = " << c.max_iterations << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n'
     << "validate_every = " << c.validate_every << '\n'
     << "ce_weight = " << c.loss.ce << '\n'
     << "dice_weight = " << c.loss.dice << '\n'
     << "dice_smooth = " << c.loss.smooth << '\n';
  return os.str();
}

inline bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_real;
  using detail::parse_uint;
  if (apply_model_key(c.model, key, v)) return true;
  if (key == "edge") c.edge = parse_uint(key, v);
  else if (key == "lr") c.lr = parse_real(key, v);
  else if (key == "epochs") c.epochs = parse_uint(key, v);
  else if (key == "max_iterations") c.max_iterations = parse_uint(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_uint(key, v);
  else if (key == "validate_every") c.validate_every = parse_uint(key, v);
  else if (key == "ce_weight") c.loss.ce = parse_real(key, v);
  else if (key == "dice_weight") c.loss.dice = parse_real(key, v);
  else if (key == "dice_smooth") c.loss.smooth = parse_real(key, v);
  else return false;
  return true;
}

inline void validate(const TrainConfig& c) {
  c.model.validate();
  c.model.validate_input(c.edge);
  if (!(c.lr > 0) || !std::isfinite(c.lr)) throw ConfigError("lr must be a positive finite number");
  if (c.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (c.loss.ce < 0 || c.loss.dice < 0 || c.loss.smooth < 0) throw ConfigError("loss weights must be non-negative");
}

/// Parses a flat `key = value` config; unknown keys are errors. `state.*` keys are skipped
/// (they only appear in checkpoint echoes).
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  for (const auto& [k, v] : detail::parse_key_values(text)) {
    if (k.rfind("state.", 0) == 0) continue;
    if (!apply_train_key(c, k, v)) throw ConfigError("unknown config key '" + k + "'");
  }
  validate(c);
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

// ---------------------------------------------------------------------------
// samples and inference

struct Sample {
  std::string id;
  Tensor<float> ct;  // [E, E, E], normalized and padded
  Tensor<float> mri;
  LabelBuffer labels;  // padded, same layout
  Extents before{0, 0, 0};
  Extents original{1, 1, 1};
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
};

inline Sample prepare_sample(const CasePair& cp, std::size_t edge, std::size_t classes) {
  if (cp.ct.extents != cp.mri.extents || cp.ct.extents != cp.labels.extents) {
    throw ShapeError("case '" + cp.id + "': CT, MRI and labels differ in extents");
  }
  cp.labels.validate(classes);
  const Extents target{edge, edge, edge};
  Sample s;
  s.id = cp.id;
  auto ct = pad_to_extents(normalize_intensity(cp.ct), target);
  auto mri = pad_to_extents(normalize_intensity(cp.mri), target);
  auto lab = pad_to_extents(cp.labels, target);
  const Shape shape{edge, edge, edge};
  s.ct = Tensor<float>(shape, std::move(ct.value.data));
  s.mri = Tensor<float>(shape, std::move(mri.value.data));
  s.labels = std::make_shared<const std::vector<std::uint8_t>>(std::move(lab.value.data));
  s.before = ct.before;
  s.original = ct.original;
  s.spacing = cp.labels.spacing;
  return s;
}

/// Per-voxel argmax (first maximum) of logits [D, H, W, K].
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_labels expects [D,H,W,K], got " + shape_str(logits.shape()));
  const auto& s = logits.shape();
  LabelMap out(Extents{s[0], s[1], s[2]});
  const std::size_t K = s[3];
  const T* x = logits.data().data();
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (x[i * K + k] > x[i * K + best]) best = k;
    }
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Segments one prepared sample; the result has the case's original extents.
inline LabelMap predict(const ParameterStore<float>& params, const ModelConfig& cfg, const Sample& s) {
  LabelMap padded = argmax_labels(micformer_forward(s.ct, s.mri, params, cfg));
  padded.spacing = s.spacing;
  return crop(padded, s.before, s.original);
}

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<MetricsReport> cases;
  MetricsReport mean;
};

inline EvalResult evaluate_predictions(const std::vector<std::string>& ids, const std::vector<LabelMap>& preds,
                                       const std::vector<LabelMap>& gts, std::size_t classes) {
  if (preds.size() != gts.size() || ids.size() != gts.size()) throw ConfigError("prediction and case counts differ");
  if (gts.empty()) throw ConfigError("nothing to evaluate");
  EvalResult r;
  r.ids = ids;
  for (std::size_t i = 0; i < gts.size(); ++i) r.cases.push_back(report(preds[i], gts[i], classes));
  r.mean = aggregate(r.cases);
  return r;
}

/// Segments every case with the model and scores it against its labels.
inline EvalResult evaluate(const ParameterStore<float>& params, const TrainConfig& cfg,
                           const std::vector<CasePair>& cases) {
  std::vector<std::string> ids;
  std::vector<LabelMap> preds, gts;
  for (const auto& cp : cases) {
    ids.push_back(cp.id);
    preds.push_back(predict(params, cfg.model, prepare_sample(cp, cfg.edge, cfg.model.classes)));
    gts.push_back(cp.labels);
  }
  return evaluate_predictions(ids, preds, gts, cfg.model.classes);
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j;
  j["mean"] = to_json(r.mean);
  j["cases"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.cases.size(); ++i) {
    auto c = to_json(r.cases[i]);
    c["id"] = r.ids[i];
    j["cases"].push_back(std::move(c));
  }
  return j;
}

// ---------------------------------------------------------------------------
// run log

/// Append-only JSON-lines log. Records of type "step" must have strictly increasing steps.
class RunLog {
 public:
  RunLog() = default;
  RunLog(const std::filesystem::path& path, bool append) : path_(path) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open run log " + path.string());
    if (append) {
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto rec = nlohmann::json::parse(line);
        if (rec.value("type", "") == "step") last_step_ = rec.at("step").get<std::int64_t>();
        records_.push_back(std::move(rec));
      }
    }
  }

  void append(const nlohmann::json& rec) {
    if (rec.value("type", "") == "step") {
      const auto step = rec.at("step").get<std::int64_t>();
      if (step <= last_step_) throw std::logic_error("run log steps must increase");
      last_step_ = step;
    }
    records_.push_back(rec);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      out << rec.dump() << '\n';
      if (!out) throw std::runtime_error("cannot append to run log " + path_.string());
    }
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::filesystem::path path_;
  std::vector<nlohmann::json> records_;
  std::int64_t last_step_ = -1;
};

// ---------------------------------------------------------------------------
// training archives: parameters plus optimizer moments in one checkpoint

inline constexpr const char* kMomentPrefix1 = "optim.m/";
inline constexpr const char* kMomentPrefix2 = "optim.v/";

struct TrainingState {
  ParameterStore<float> params;
  OptimState<float> optim;
  std::size_t epoch = 0;  // completed epochs
};

inline void save_training_state(const TrainingState& s, const TrainConfig& cfg, const std::filesystem::path& path) {
  ParameterStore<float> archive;
  for (const auto& [name, t] : s.params) archive.add(name, t);
  for (const auto& [name, t] : s.params) {
    auto m = s.optim.m.count(name) ? s.optim.m.at(name) : std::vector<float>(t.numel(), 0.f);
    auto v = s.optim.v.count(name) ? s.optim.v.at(name) : std::vector<float>(t.numel(), 0.f);
    archive.add(kMomentPrefix1 + name, Tensor<float>(t.shape(), std::move(m)));
    archive.add(kMomentPrefix2 + name, Tensor<float>(t.shape(), std::move(v)));
  }
  std::string text = to_text(cfg) + "state.epoch = " + std::to_string(s.epoch) + "\nstate.step = " +
                     std::to_string(s.optim.t) + "\n";
  save_params(archive, path, text);
}

struct LoadedModel {
  TrainConfig config;
  TrainingState state;
};

/// Loads a checkpoint written by train() or save_params(); moments are optional.
inline LoadedModel load_model(const std::filesystem::path& path) {
  Checkpoint<float> ck = load_params<float>(path);
  LoadedModel lm;
  lm.config = parse_train_config(ck.config_text);
  const auto kv = detail::parse_key_values(ck.config_text);
  if (kv.count("state.epoch")) lm.state.epoch = detail::parse_uint("state.epoch", kv.at("state.epoch"));
  if (kv.count("state.step")) lm.state.optim.t = detail::parse_uint("state.step", kv.at("state.step"));
  for (const auto& [name, t] : ck.params) {
    if (name.rfind(kMomentPrefix1, 0) == 0) {
      auto d = t.data();
      lm.state.optim.m[name.substr(8)] = std::vector<float>(d.begin(), d.end());
    } else if (name.rfind(kMomentPrefix2, 0) == 0) {
      auto d = t.data();
      lm.state.optim.v[name.substr(8)] = std::vector<float>(d.begin(), d.end());
    } else {
      lm.state.params.add(name, t);
    }
  }
  ParameterStore<float> expected = init_parameters<float>(lm.config.model);
  if (expected.names() != lm.state.params.names()) {
    throw ConfigError("checkpoint " + path.string() + " does not match the architecture in its config echo");
  }
  for (const auto& [name, t] : expected) {
    if (t.shape() != lm.state.params.get(name).shape()) throw ShapeError("checkpoint tensor '" + name + "' has wrong shape");
  }
  lm.state.optim.lr = lm.config.lr;
  return lm;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainOptions {
  std::filesystem::path resume;  // checkpoint to continue from; empty starts fresh
  bool write_files = true;  // runlog.jsonl, timing.jsonl, checkpoint.micf, best.micf under out_dir
  std::function<void(const nlohmann::json&)> on_record;
  /// Called with each epoch record; returning true ends training after that epoch.
  std::function<bool(const nlohmann::json&)> stop_after;
};

struct TrainResult {
  TrainingState state;
  std::vector<nlohmann::json> log;
  double best_val_dice = -1;
  std::size_t steps = 0;
};

inline bool all_finite(const GradientMap<float>& g) {
  for (const auto& [n, t] : g) {
    for (float x : t.data()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

/// Batch-size-1 training with seeded per-epoch shuffling. Deterministic for a fixed config.
inline TrainResult train(const TrainConfig& cfg, const std::vector<CasePair>& train_cases,
                         const std::vector<CasePair>& val_cases, const std::filesystem::path& out_dir,
                         const TrainOptions& opt = {}) {
  validate(cfg);
  if (train_cases.empty()) throw ConfigError("training split is empty");
  std::vector<Sample> samples;
  for (const auto& cp : train_cases) samples.push_back(prepare_sample(cp, cfg.edge, cfg.model.classes));

  TrainResult res;
  TrainingState& st = res.state;
  if (!opt.resume.empty()) {
    LoadedModel lm = load_model(opt.resume);
    if (to_text(lm.config.model) != to_text(cfg.model)) {
      throw ConfigError("resume checkpoint was trained with a different model config");
    }
    st = std::move(lm.state);
  } else {
    st.params = init_parameters<float>(cfg.model);
  }
  st.optim.lr = cfg.lr;

  RunLog log;
  std::ofstream timing;
  if (opt.write_files) {
    std::filesystem::create_directories(out_dir);
    log = RunLog(out_dir / "runlog.jsonl", !opt.resume.empty());
    timing.open(out_dir / "timing.jsonl", opt.resume.empty() ? std::ios::trunc : std::ios::app);
  }
  auto emit = [&](const nlohmann::json& rec) {
    log.append(rec);
    if (opt.on_record) opt.on_record(rec);
  };
  if (opt.resume.empty()) {
    emit({{"type", "config"}, {"text", to_text(cfg)}, {"parameters", st.params.scalar_count()}});
  }

  const std::uint64_t shuffle_seed = derive_seed(cfg.model.seed, hash_name("epoch_order"));
  bool capped = false;
  for (std::size_t epoch = st.epoch; epoch < cfg.epochs && !capped; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(shuffle_seed, epoch));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t idx : order) {
      const Sample& s = samples[idx];
      const auto t0 = std::chrono::steady_clock::now();
      auto tape = Tape<float>::create();
      ParameterStore<float> bound = st.params.bind(tape);
      const std::uint64_t step = st.optim.t + 1;
      // Non-finite parameters can surface as a domain error inside the forward pass.
      std::optional<LossTerms<float>> terms;
      GradientMap<float> grads;
      try {
        terms = seg_loss_terms(micformer_forward(s.ct, s.mri, bound, cfg.model), s.labels, cfg.loss);
        grads = tape->backward(terms->total);
      } catch (const DomainError&) {
        terms.reset();
      }
      const float loss = terms ? terms->total.item() : std::numeric_limits<float>::quiet_NaN();
      if (!std::isfinite(loss) || !all_finite(grads)) {
        emit({{"type", "abort"},
              {"step", step},
              {"epoch", epoch},
              {"case", s.id},
              {"reason", std::isfinite(loss) ? "non-finite gradient" : "non-finite loss"}});
        throw NumericError("non-finite " + std::string(std::isfinite(loss) ? "gradient" : "loss") + " at step " +
                           std::to_string(step) + " on case '" + s.id + "'");
      }
      adam_step(st.params, grads, st.optim);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      emit({{"type", "step"},
            {"step", st.optim.t},
            {"epoch", epoch},
            {"case", s.id},
            {"loss", loss},
            {"ce", terms->ce.item()},
            {"dice_loss", terms->dice.item()}});
      if (timing.is_open()) timing << nlohmann::json{{"step", st.optim.t}, {"seconds", secs}}.dump() << '\n';
      loss_sum += loss;
      ++seen;
      ++res.steps;
      if (cfg.max_iterations && st.optim.t >= cfg.max_iterations) {
        capped = true;
        break;
      }
    }
    st.epoch = epoch + 1;

    nlohmann::json rec{{"type", "epoch"}, {"epoch", st.epoch}, {"train_loss", loss_sum / static_cast<double>(seen)}};
    const bool validate_now =
        !val_cases.empty() && cfg.validate_every && (st.epoch % cfg.validate_every == 0 || st.epoch == cfg.epochs || capped);
    if (validate_now) {
      EvalResult ev = evaluate(st.params, cfg, val_cases);
      rec["val_mean_dice"] = ev.mean.mean_dice;
      rec["val_miou"] = ev.mean.miou;
      rec["val_mean_hd95"] = ev.mean.mean_hd95;
      if (ev.mean.mean_dice > res.best_val_dice) {
        res.best_val_dice = ev.mean.mean_dice;
        if (opt.write_files) save_params(st.params, out_dir / "best.micf", to_text(cfg));
      }
    }
    emit(rec);
    if (opt.stop_after && opt.stop_after(rec)) capped = true;
    const bool last = st.epoch == cfg.epochs || capped;
    if (opt.write_files && (last || (cfg.checkpoint_every && st.epoch % cfg.checkpoint_every == 0))) {
      save_training_state(st, cfg, out_dir / "checkpoint.micf");
    }
  }
  res.log = log.records();
  return res;
}

}  // namespace micformer
