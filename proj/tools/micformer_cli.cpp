// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// micformer: synth | train | eval | infer | gradcheck | bench
//
// Exit status: 0 success, 2 usage or configuration error, 3 data error (missing, corrupt or
// mismatched files), 4 numeric failure (non-finite training loss, failed gradient check).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "micformer/gradcheck.hpp"
#include "micformer/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace micformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Manifest {
  std::vector<std::string> cases, train, test;
  json raw;
};

Manifest read_manifest(const fs::path& data) {
  const fs::path p = data / "manifest.json";
  std::ifstream in(p);
  if (!in) throw FormatError("no manifest at " + p.string());
  Manifest m;
  try {
    in >> m.raw;
    m.cases = m.raw.at("cases").get<std::vector<std::string>>();
    m.train = m.raw.at("train").get<std::vector<std::string>>();
    m.test = m.raw.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + p.string() + ": " + e.what());
  }
  return m;
}

std::vector<CasePair> read_cases(const fs::path& data, const std::vector<std::string>& ids) {
  std::vector<CasePair> out;
  for (const auto& id : ids) out.push_back(read_case(data, id));
  return out;
}

std::vector<std::string> split_ids(const Manifest& m, const std::string& split) {
  if (split == "train") return m.train;
  if (split == "test") return m.test;
  if (split == "all") return m.cases;
  throw ConfigError("split must be train, test or all");
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << s;
  if (!out) throw FormatError("cannot write " + p.string());
}

void print_report(const EvalResult& r, const std::string& json_out, const std::string& text_out) {
  for (std::size_t i = 0; i < r.cases.size(); ++i) {
    std::printf("%-12s dice %.4f  miou %.4f  hd95 %.3f\n", r.ids[i].c_str(), r.cases[i].mean_dice, r.cases[i].miou,
                r.cases[i].mean_hd95);
  }
  std::printf("mean         dice %.4f  miou %.4f  hd95 %.3f\n", r.mean.mean_dice, r.mean.miou, r.mean.mean_hd95);
  if (!json_out.empty()) write_text(json_out, to_json(r).dump(2) + "\n");
  if (!text_out.empty()) write_text(text_out, to_text(r.mean));
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t cases = 20, edge = 64, classes = 8;
  std::uint64_t seed = 0;
  double fraction = 0.8;
  std::string misalignment = "smooth";
  double displacement = 2.0;
};

int run_synth(const SynthArgs& a) {
  if (a.cases < 2) throw ConfigError("--cases must be >= 2");
  if (a.edge < 32) throw ConfigError("--edge must be >= 32, got " + std::to_string(a.edge));
  if (a.classes < 3) throw ConfigError("--classes must be >= 3");
  SynthOptions opt;
  opt.max_displacement = a.displacement;
  if (a.misalignment == "translate") opt.misalignment = Misalignment::translate;
  else if (a.misalignment != "smooth") throw ConfigError("--misalignment must be smooth or translate");
  fs::create_directories(a.out);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < a.cases; ++i) {
    CasePair cp = synth_case(derive_seed(a.seed, i), a.edge, a.classes, opt);
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%03zu", i);
    cp.id = buf;
    write_case(cp, a.out);
    ids.push_back(cp.id);
  }
  DatasetSplit split = make_split(ids, a.fraction, a.seed);
  json m{{"cases", ids},
         {"train", split.train},
         {"test", split.test},
         {"edge", a.edge},
         {"classes", a.classes},
         {"seed", a.seed},
         {"misalignment", a.misalignment},
         {"max_displacement", a.displacement}};
  write_text(fs::path(a.out) / "manifest.json", m.dump(2) + "\n");
  std::printf("wrote %zu cases (%zu train / %zu test) to %s\n", ids.size(), split.train.size(), split.test.size(),
              a.out.c_str());
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> set;
};

TrainConfig config_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  for (const auto& kv : overrides) text += "\n" + kv;
  return parse_train_config(text);
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = config_with_overrides(a.config, a.set);
  Manifest m = read_manifest(a.data);
  auto train_cases = read_cases(a.data, m.train);
  auto test_cases = read_cases(a.data, m.test);
  TrainOptions opt;
  opt.resume = a.resume;
  opt.on_record = [](const json& r) {
    if (r["type"] == "epoch") {
      std::printf("epoch %3zu  loss %.5f", r["epoch"].get<std::size_t>(), r["train_loss"].get<double>());
      if (r.contains("val_mean_dice")) std::printf("  val dice %.4f", r["val_mean_dice"].get<double>());
      std::printf("\n");
      std::fflush(stdout);
    }
  };
  TrainResult r = train(cfg, train_cases, test_cases, a.out, opt);
  std::printf("trained %zu steps; best validation dice %.4f; checkpoints in %s\n", r.steps, r.best_val_dice,
              a.out.c_str());
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, predictions, data, split = "test", json_out, text_out;
};

int run_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.predictions.empty()) {
    throw ConfigError("eval needs exactly one of --checkpoint or --predictions");
  }
  Manifest m = read_manifest(a.data);
  const auto ids = split_ids(m, a.split);
  if (!a.checkpoint.empty()) {
    LoadedModel lm = load_model(a.checkpoint);
    print_report(evaluate(lm.state.params, lm.config, read_cases(a.data, ids)), a.json_out, a.text_out);
    return kExitOk;
  }
  const std::size_t classes = m.raw.value("classes", std::size_t{0});
  if (classes < 2) throw FormatError("manifest does not record the class count");
  std::vector<LabelMap> preds, gts;
  for (const auto& id : ids) {
    gts.push_back(read_labels(fs::path(a.data) / (id + "_labels.mvol")));
    preds.push_back(read_labels(fs::path(a.predictions) / (id + "_pred.mvol")));
    if (preds.back().extents != gts.back().extents) throw ShapeError("prediction for '" + id + "' has wrong extents");
  }
  print_report(evaluate_predictions(ids, preds, gts, classes), a.json_out, a.text_out);
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint, ct, mri, out;
};

int run_infer(const InferArgs& a) {
  LoadedModel lm = load_model(a.checkpoint);
  CasePair cp;
  cp.id = fs::path(a.ct).stem().string();
  cp.ct = read_volume(a.ct, Modality::ct);
  cp.mri = read_volume(a.mri, Modality::mri);
  if (cp.ct.extents != cp.mri.extents) throw ShapeError("CT and MRI extents differ");
  cp.labels = LabelMap(cp.ct.extents);
  cp.labels.spacing = cp.ct.spacing;
  Sample s = prepare_sample(cp, lm.config.edge, lm.config.model.classes);
  LabelMap pred = predict(lm.state.params, lm.config.model, s);
  write_mvol(pred, a.out);
  std::printf("wrote %zux%zux%zu label map to %s\n", pred.extents[2], pred.extents[1], pred.extents[0], a.out.c_str());
  return kExitOk;
}

struct GradcheckArgs {
  std::string op = "all", json_out;
  std::size_t trials = 5;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> ops = a.op == "all" ? gradcheck_ops() : std::vector<std::string>{a.op};
  json report = json::array();
  bool ok = true;
  for (const auto& op : ops) {
    GradcheckResult r = gradcheck_op(op, a.trials, a.seed);
    std::printf("%-30s trials %zu  coords %5zu  max rel err %.3e  %s\n", r.op.c_str(), r.trials, r.coordinates,
                r.max_rel_error, r.passed() ? "ok" : "FAIL");
    std::fflush(stdout);
    ok &= r.passed();
    report.push_back({{"op", r.op}, {"trials", r.trials}, {"coordinates", r.coordinates}, {"max_rel_error", r.max_rel_error}});
  }
  if (!a.json_out.empty()) write_text(a.json_out, report.dump(2) + "\n");
  return ok ? kExitOk : kExitNumeric;
}

struct BenchArgs {
  std::string config, json_out;
  std::size_t repeats = 3;
};

template <typename Fn>
double time_mean(std::size_t repeats, Fn&& fn) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < repeats; ++i) fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / double(repeats);
}

int run_bench(const BenchArgs& a) {
  if (a.repeats == 0) throw ConfigError("--repeats must be >= 1");
  TrainConfig cfg = config_with_overrides(a.config, {});
  const ModelConfig& mc = cfg.model;
  ParameterStore<float> params = init_parameters<float>(mc);
  Rng rng(derive_seed(mc.seed, hash_name("bench")));
  auto volume = [&] {
    std::vector<float> d(cfg.edge * cfg.edge * cfg.edge);
    for (auto& x : d) x = static_cast<float>(rng.normal());
    return Tensor<float>({cfg.edge, cfg.edge, cfg.edge}, std::move(d));
  };
  const Tensor<float> ct = volume(), mri = volume();
  std::vector<std::uint8_t> lab(ct.numel());
  for (auto& l : lab) l = static_cast<std::uint8_t>(rng.below(mc.classes));
  const LabelBuffer labels = std::make_shared<const std::vector<std::uint8_t>>(std::move(lab));

  // Attention kernels on the first-stage lattice with random, non-zero weights.
  const std::size_t L = mc.lattice_at(cfg.edge, 0), C = mc.channels, w = mc.window_for(L);
  auto rand_t = [&](Shape s, double sigma) {
    std::vector<float> d(shape_numel(s));
    for (auto& x : d) x = static_cast<float>(sigma * rng.normal());
    return Tensor<float>(std::move(s), std::move(d));
  };
  const TokenGrid<float> fa(rand_t({L, L, L, C}, 1.0)), fb(rand_t({L, L, L, C}, 1.0));
  AttentionParams<float> ap;
  ap.wq = rand_t({C, C}, 0.2);
  ap.bq = rand_t({C}, 0.1);
  ap.wk = rand_t({C, C}, 0.2);
  ap.bk = rand_t({C}, 0.1);
  ap.wv = rand_t({C, C}, 0.2);
  ap.bv = rand_t({C}, 0.1);
  ap.wo = rand_t({C, C}, 0.2);
  ap.bo = rand_t({C}, 0.1);
  const std::size_t span = 2 * mc.window - 1;
  ap.rel_bias = rand_t({span * span * span, mc.heads_at(0)}, 0.1);
  ap.heads = mc.heads_at(0);
  ap.window = mc.window;
  ap.value_source = mc.value_source;
  const ConvKernel3D<float> k{rand_t({3, 3, 3, 2 * C}, 0.2), rand_t({2 * C, 3}, 0.2), rand_t({3}, 0.1)};

  json entries = json::array();
  auto record = [&](const std::string& name, const std::string& shape, double secs) {
    entries.push_back({{"kernel", name}, {"shape", shape}, {"repeats", a.repeats}, {"seconds", secs}});
    std::printf("%-28s %-22s %10.4f s\n", name.c_str(), shape.c_str(), secs);
    std::fflush(stdout);
  };
  const std::string vol = std::to_string(cfg.edge) + "^3";
  const std::string lat = std::to_string(L) + "^3x" + std::to_string(C);
  record("forward", vol, time_mean(a.repeats, [&] { micformer_forward(ct, mri, params, mc); }));
  record("forward_backward", vol, time_mean(a.repeats, [&] {
           auto tape = Tape<float>::create();
           ParameterStore<float> bound = params.bind(tape);
           tape->backward(seg_loss(micformer_forward(ct, mri, bound, mc), labels, cfg.loss));
         }));
  record("windowed_cross_attention", lat, time_mean(a.repeats, [&] { windowed_cross_attention(fa, fb, ap, w, 0); }));
  record("deformable_cross_attention", lat,
         time_mean(a.repeats, [&] { deformable_cross_attention(fa, fb, ap, k, w, 0); }));
  json report{{"config", to_text(cfg)}, {"kernels", entries}};
  if (!a.json_out.empty()) write_text(a.json_out, report.dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-stream CT/MRI segmentation transformer: data synthesis, training, evaluation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write synthetic CT/MRI/label cases and a split manifest");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--cases", sa.cases, "Number of cases");
  synth->add_option("--edge", sa.edge, "Cube edge in voxels (>= 32)");
  synth->add_option("--classes", sa.classes, "Classes including background (>= 3)");
  synth->add_option("--seed", sa.seed, "Seed");
  synth->add_option("--train-fraction", sa.fraction, "Training share of the split");
  synth->add_option("--misalignment", sa.misalignment, "smooth or translate");
  synth->add_option("--max-displacement", sa.displacement, "MRI-to-CT displacement bound in voxels");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train on the manifest's training split");
  tr->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "Case directory with manifest.json")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", ta.out, "Output directory for logs and checkpoints")->required();
  tr->add_option("--resume", ta.resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--set", ta.set, "Extra 'key = value' config lines");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint or a directory of predictions");
  ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--predictions", ea.predictions, "Directory of <id>_pred.mvol files")->check(CLI::ExistingDirectory);
  ev->add_option("--data", ea.data, "Case directory with manifest.json")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ea.split, "train, test or all");
  ev->add_option("--json", ea.json_out, "Write the structured report here");
  ev->add_option("--report", ea.text_out, "Write the key = value report here");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Segment one CT/MRI pair");
  inf->add_option("--checkpoint", ia.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--ct", ia.ct, "CT volume (.mvol)")->required()->check(CLI::ExistingFile);
  inf->add_option("--mri", ia.mri, "MRI volume (.mvol)")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", ia.out, "Output label map (.mvol)")->required();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op");
  gc->add_option("--op", ga.op, "Op name or 'all'");
  gc->add_option("--trials", ga.trials, "Random trials per op");
  gc->add_option("--seed", ga.seed, "Seed");
  gc->add_option("--json", ga.json_out, "Write the structured report here");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time forward, backward and attention kernels");
  bench->add_option("--config", ba.config, "key = value config file")->check(CLI::ExistingFile);
  bench->add_option("--repeats", ba.repeats, "Timed repetitions per kernel");
  bench->add_option("--json", ba.json_out, "Write the structured report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*tr) return run_train(ta);
    if (*ev) return run_eval(ea);
    if (*inf) return run_infer(ia);
    if (*gc) return run_gradcheck(ga);
    if (*bench) return run_bench(ba);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
