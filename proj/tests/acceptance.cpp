// Acceptance suite: one PASS/FAIL/SKIP line per criterion, exit status 1 on any FAIL.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "reprog/run.hpp"
#include "test_util.hpp"

using namespace reprog;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-6;         // relative, double precision
constexpr double kShadowedGradTol = 1e-8; // absolute, conv biases feeding a train-mode batch norm
constexpr double kOracleTol = 1e-12;
constexpr double kUnetFloor = 0.90;
constexpr double kOrderGap = 0.02;
constexpr double kIdentityNearBaseline = 0.20;
constexpr std::size_t kSweepSeeds = 3;
constexpr double kOpenMicMissingTol = 0.005;

const fs::path kConfigs = fs::path(REPROG_SOURCE_DIR) / "configs";

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " [" << id << "] " << what << ": " << detail << std::endl;
}

void skip(int id, const std::string& what, const std::string& detail) {
  std::cout << "SKIP [" << id << "] " << what << ": " << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

ExperimentConfig preset(const std::string& name) { return load_config_file(kConfigs / (name + ".cfg")); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Synthetic sweep shared by criteria 1 and 7

struct Sweep {
  std::map<std::string, std::vector<double>> test_f1;  // method -> per-seed test macro-F1
  bool unet_seed1_frozen = false;
  bool unet_seed1_probe_equal = false;
  std::size_t unet_seed1_epochs = 0;
  double unet_seed1_seconds = 0;
  bool all_frozen = true;
  double seconds = 0;

  double mean(const std::string& m) const {
    const auto& v = test_f1.at(m);
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

Sweep run_sweep() {
  Sweep sw;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> methods = {"identity", "noise", "cnn", "unet"};
  std::map<std::string, ExperimentConfig> cfgs;
  for (const auto& m : methods) cfgs[m] = preset("synth_" + m);

  Rng probe_rng(2024);
  const Dims dims = cfgs["unet"].input_dims();
  Matrix<float> probe(dims.frames, dims.bands);
  for (auto& v : probe.span()) v = static_cast<float>(probe_rng.normal());

  for (std::uint64_t seed = 1; seed <= kSweepSeeds; ++seed) {
    const auto ds = dataset_for_seed(cfgs["unet"], seed);
    const auto test_idx = split_indices(ds.records, SplitTag::kTest);
    {
      // untrained baseline: the identity system exactly as fit() initializes it
      const auto& cfg = cfgs["identity"];
      const SpectrogramStore store(cfg.frontend, {});
      auto model = build_model<float>(cfg, make_backbone<float>(cfg), ds.vocab, seed);
      const auto f1 = score_predictions(predict_split(model, ds.records, test_idx, store, cfg.plan.batch_size), cfg.threshold);
      sw.test_f1["untrained"].push_back(f1.macro_f1);
      std::cerr << "seed " << seed << " untrained test " << fmt(f1.macro_f1) << "\n";
    }
    for (const auto& m : methods) {
      const auto& cfg = cfgs[m];
      const SpectrogramStore store(cfg.frontend, {});
      auto backbone = make_backbone<float>(cfg);
      const auto fp_before = backbone->fingerprint();
      const auto probe_before = backbone->score(probe);
      const auto t = std::chrono::steady_clock::now();
      const auto res = fit<float>(cfg, ds.records, ds.vocab, store, backbone, seed);
      const double secs = seconds_since(t);
      const bool frozen = backbone->fingerprint() == fp_before;
      const bool probe_equal = backbone->score(probe) == probe_before;
      sw.all_frozen = sw.all_frozen && frozen && probe_equal;
      if (m == "unet" && seed == 1) {
        sw.unet_seed1_frozen = frozen;
        sw.unet_seed1_probe_equal = probe_equal;
        sw.unet_seed1_epochs = res.log.size();
        sw.unet_seed1_seconds = secs;
      }
      sw.test_f1[m].push_back(res.test.macro_f1);
      std::cerr << "seed " << seed << " " << m << " best epoch " << res.best_epoch << " test "
                << fmt(res.test.macro_f1) << " (" << fmt(secs, 3) << " s)\n";
    }
  }
  sw.seconds = seconds_since(t0);
  return sw;
}

// ---------------------------------------------------------------------------

void criterion1(const Sweep& sw) {
  const bool pass = sw.unet_seed1_frozen && sw.unet_seed1_probe_equal && sw.unet_seed1_epochs == 50 && sw.all_frozen &&
                    sw.unet_seed1_seconds < 600;
  report(1, pass, "frozen backbone",
         "unet seed 1, " + std::to_string(sw.unet_seed1_epochs) + " epochs in " + fmt(sw.unet_seed1_seconds, 3) +
             " s; fingerprint " + (sw.unet_seed1_frozen ? "unchanged" : "CHANGED") + ", probe scores " +
             (sw.unet_seed1_probe_equal ? "bit-identical" : "DIFFER") + "; all sweep runs frozen: " +
             (sw.all_frozen ? "yes" : "no"));
}

void criterion2() {
  using testutil::random_tensor;
  Rng rng(2);
  double worst = 0, shadowed = 0;
  std::string where;
  auto track = [&](const std::string& name, const testutil::GradReport& r) {
    if (r.params > worst) {
      worst = r.params;
      where = name;
    }
    shadowed = std::max(shadowed, r.shadowed);
  };
  {
    auto r = make_reprogrammer<double>(ReprogrammerKind::kNoise, {16, 16}, {}, 1);
    for (auto& v : r->parameters()[0]->value) v = rng.normal();
    auto x = random_tensor(2, 1, 16, 16, rng);
    const auto w = random_tensor(2, 1, 16, 16, rng);
    auto twin = make_reprogrammer<long double>(ReprogrammerKind::kNoise, {16, 16}, {}, 1);
    track("noise", testutil::check_gradients(*r, *twin, x, w));
  }
  {
    ReprogrammerOptions opts;
    opts.cnn_hidden = 3;
    auto r = make_reprogrammer<double>(ReprogrammerKind::kCnn, {16, 16}, opts, 2);
    auto x = random_tensor(2, 1, 16, 16, rng);
    const auto w = random_tensor(2, 1, 16, 16, rng);
    auto twin = make_reprogrammer<long double>(ReprogrammerKind::kCnn, {16, 16}, opts, 2);
    track("cnn", testutil::check_gradients(*r, *twin, x, w));
  }
  {
    ReprogrammerOptions opts;
    opts.unet_widths = {2, 3, 4};
    auto r = make_reprogrammer<double>(ReprogrammerKind::kUnet, {16, 16}, opts, 3);
    for (auto* p : r->parameters()) {
      if (p->name.find(".bn.") != std::string::npos) {
        for (auto& v : p->value) v += 0.3 * rng.normal();
      }
    }
    auto x = random_tensor(2, 1, 16, 16, rng);
    const auto w = random_tensor(2, 1, 16, 16, rng);
    auto twin = make_reprogrammer<long double>(ReprogrammerKind::kUnet, {16, 16}, opts, 3);
    track("unet", testutil::check_gradients(*r, *twin, x, w));
  }
  {
    auto m = FclMapper<double>::initialized(12, 4, rng);
    std::vector<double> s(12), u(4);
    for (auto& v : s) v = rng.normal();
    for (auto& v : u) v = rng.normal();
    const auto g = fcl_gradient<double>(s, m, u);
    auto loss = [&] {
      const auto p = fcl_forward<double>(s, m);
      double acc = 0;
      for (std::size_t c = 0; c < 4; ++c) acc += u[c] * p[c];
      return acc;
    };
    double e = 0;
    for (std::size_t i = 0; i < m.weight.size(); ++i) {
      e = std::max(e, testutil::rel_err(g.weight[i], testutil::central_diff5(&m.weight.value[i], 1e-4, loss)));
    }
    for (std::size_t i = 0; i < m.bias.size(); ++i) {
      e = std::max(e, testutil::rel_err(g.bias[i], testutil::central_diff5(&m.bias.value[i], 1e-4, loss)));
    }
    track("fcl", {e, 0, 0});
  }
  report(2, worst <= kGradTol && shadowed <= kShadowedGradTol, "gradient correctness",
         "max relative error " + fmt(worst, 3) + " (" + where + ") <= " + fmt(kGradTol) +
             "; batch-norm-shadowed conv biases max |grad| " + fmt(shadowed, 3) + " <= " + fmt(kShadowedGradTol));
}

std::vector<const TriStateLabelVector*> pointers(const std::vector<TriStateLabelVector>& v) {
  std::vector<const TriStateLabelVector*> out;
  for (const auto& l : v) out.push_back(&l);
  return out;
}

void criterion3() {
  Rng rng(3);
  double worst = 0;
  bool all_missing_zero = true;
  std::size_t n_all_missing = 0, n_no_missing = 0;
  double worst_plain = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(6), C = 1 + rng.below(7);
    const double missing = trial % 5 == 0 ? 1.0 : trial % 5 == 1 ? 0.0 : rng.uniform();
    std::vector<std::vector<double>> preds;
    std::vector<TriStateLabelVector> labels;
    for (std::size_t i = 0; i < n; ++i) {
      preds.push_back(oracle::random_probs(C, rng));
      labels.push_back(oracle::random_labels(C, missing, rng));
    }
    const double got = partial_bce_batch(preds, pointers(labels)).loss;
    worst = std::max(worst, std::abs(got - oracle::partial_bce(preds, labels)));
    if (missing == 1.0) {
      ++n_all_missing;
      all_missing_zero = all_missing_zero && got == 0.0;
    }
    if (missing == 0.0) {
      ++n_no_missing;
      std::vector<std::vector<int>> y;
      for (const auto& l : labels) {
        std::vector<int> row;
        for (auto s : l) row.push_back(s == LabelState::kPositive);
        y.push_back(row);
      }
      worst_plain = std::max(worst_plain, std::abs(got - oracle::mean_bce(preds, y)));
    }
  }
  report(3, worst <= kOracleTol && all_missing_zero && worst_plain <= kOracleTol, "loss oracle",
         "1000 fixtures, max |diff| " + fmt(worst, 3) + "; " + std::to_string(n_all_missing) + " all-missing exactly 0: " +
             (all_missing_zero ? "yes" : "no") + "; " + std::to_string(n_no_missing) + " no-missing vs mean BCE max |diff| " +
             fmt(worst_plain, 3));
}

void criterion4() {
  Rng rng(4);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(60), C = 1 + rng.below(8);
    const double missing = 0.9 * static_cast<double>(trial % 10) / 9.0;
    std::vector<TriStateLabelVector> labels;
    std::vector<std::vector<std::uint8_t>> preds;
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(oracle::random_labels(C, missing, rng));
      std::vector<std::uint8_t> p(C);
      for (auto& v : p) v = rng.bernoulli(0.4);
      preds.push_back(p);
    }
    const auto got = macro_f1(preds, labels);
    worst = std::max(worst, std::abs(got.macro_f1 - oracle::macro_f1(preds, labels)));
    const auto per = oracle::per_class_f1(preds, labels);
    for (std::size_t c = 0; c < C; ++c) worst = std::max(worst, std::abs(got.per_class[c].f1 - per[c]));
  }
  constexpr auto P = LabelState::kPositive;
  constexpr auto N = LabelState::kNegative;
  const auto d = macro_f1({{1, 0}, {0, 0}}, {{P, N}, {N, N}});
  const bool degenerate = d.per_class[1].f1 == 0.0 && d.macro_f1 == 0.5;
  report(4, worst <= kOracleTol && degenerate, "metric oracle",
         "1000 fixtures, 0-90% missing, max |diff| " + fmt(worst, 3) + "; degenerate class F1 = 0: " +
             (degenerate ? "yes" : "no"));
}

void criterion5() {
  const TrainingPlan plan;
  const double table[10] = {5e-5, 2.5e-5, 1.25e-5, 6.25e-6, 3.125e-6, 1.5625e-6, 7.8125e-7, 3.90625e-7, 1.953125e-7};
  std::size_t mismatches = 0;
  for (std::size_t e = 1; e <= 50; ++e) {
    const std::size_t block = e <= 10 ? 0 : (e - 11) / 5 + 1;
    if (lr_at_epoch(e, plan) != table[block]) ++mismatches;
  }
  report(5, mismatches == 0, "learning-rate schedule",
         std::to_string(50 - mismatches) + "/50 epochs match exactly (1-10: 5e-05 ... 46-50: " +
             fmt(lr_at_epoch(50, plan), 7) + ")");
}

void criterion6() {
  bool pass = true;
  std::string detail;
  for (const char* name : {"noise", "cnn", "unet"}) {
    const auto cfg = preset(std::string("ast_") + name);
    const Dims dims = cfg.input_dims();
    const std::size_t mapper = mapper_param_count(cfg, AstAdapter<float>::kSourceClasses, class_count(cfg));
    const auto rep = budget_report(cfg.reprogrammer, dims, cfg.reprogrammer_options, mapper);
    const bool exact = std::string(name) != "noise" || rep.total == 141632;
    pass = pass && dims == Dims{1024, 128} && class_count(cfg) == 20 && rep.within_band() && exact;
    detail += std::string(detail.empty() ? "" : "; ") + name + " " + std::to_string(rep.total) + " vs " +
              std::to_string(static_cast<std::size_t>(*rep.reference)) + " (" +
              fmt(100 * rep.relative_deviation(), 3) + "%)";
  }
  report(6, pass, "parameter budgets", detail + "; band +-30%, noise exact 141632");
}

void criterion7(const Sweep& sw) {
  const double base = sw.mean("untrained"), id = sw.mean("identity"), noise = sw.mean("noise"), cnn = sw.mean("cnn"),
               unet = sw.mean("unet");
  const bool near_baseline = std::abs(id - base) <= kIdentityNearBaseline && std::abs(id - base) < std::abs(noise - id);
  const bool pass = unet >= kUnetFloor && unet - cnn >= kOrderGap && cnn - noise >= kOrderGap &&
                    noise - id >= kOrderGap && near_baseline && sw.seconds < 1800;
  report(7, pass, "synthetic ordering",
         "mean test macro-F1 over " + std::to_string(kSweepSeeds) + " seeds: unet " + fmt(unet) + " > cnn " + fmt(cnn) +
             " > noise " + fmt(noise) + " > identity " + fmt(id) + " (untrained " + fmt(base) + ", |diff| " +
             fmt(std::abs(id - base), 3) + " <= " + fmt(kIdentityNearBaseline) + "); gaps >= " + fmt(kOrderGap) +
             "; " + fmt(sw.seconds, 4) + " s");
}

void criterion8() {
  auto noise_cfg = preset("synth_noise");
  auto id_cfg = preset("synth_identity");
  const auto vocab = Vocabulary::numbered(noise_cfg.data.synthetic.n_classes);
  auto backbone = make_backbone<float>(noise_cfg);
  bool equal = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto noise = build_model<float>(noise_cfg, backbone, vocab, seed);
    auto identity = build_model<float>(id_cfg, backbone, vocab, seed);
    Rng rng(seed);
    std::vector<Matrix<float>> xs;
    for (int i = 0; i < 6; ++i) {
      Matrix<float> m(128, 128);
      for (auto& v : m.span()) v = static_cast<float>(rng.uniform(-20, 20));
      xs.push_back(std::move(m));
    }
    std::vector<const Matrix<float>*> batch;
    for (const auto& m : xs) batch.push_back(&m);
    equal = equal && noise.predict(batch) == identity.predict(batch);
  }
  report(8, equal, "baseline anchor", std::string("noise at init vs identity, 3 seeds x 6 inputs: ") +
                                          (equal ? "bit-identical" : "DIFFER"));
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return files;
}

void criterion9() {
  testutil::TempDir dir("acceptance_determinism");
  auto cfg = preset("synth_unet");
  for (const char* s : {"synthetic.n_clips=160", "synthetic.frames=32", "synthetic.bands=32", "synthetic.blob_frames=8",
                        "train.epochs=3", "train.repeats=2"}) {
    apply_override(cfg, s);
  }
  run_training(cfg, dir / "a");
  run_training(cfg, dir / "b");
  const auto a = read_tree(dir / "a"), b = read_tree(dir / "b");
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) differing += !b.count(name) || b.at(name) != bytes;
  const bool has_all = a.count("seed_1/metrics.csv") && a.count("seed_2/best.ckpt") && a.count("seed_1/report.csv");
  report(9, differing == 0 && a.size() == b.size() && has_all, "determinism",
         std::to_string(a.size()) + " files per run (metrics, checkpoints, reports), " + std::to_string(differing) +
             " differ");
}

void criterion10() {
  const char* env = std::getenv(kDataRootEnv);
  if (!env || !*env || !fs::is_directory(env)) {
    skip(10, "OpenMIC statistics", std::string("dataset not present (set ") + kDataRootEnv + ")");
    return;
  }
  OpenMicLayout layout;
  layout.root = env;
  const auto records = load_openmic(layout, 0.5);
  const auto s = label_stats(records);
  std::size_t weak = 0;
  for (const auto& c : s.per_class) weak += c.positives < 500 || c.observed() < 1500;
  const bool pass = records.size() == 20000 && s.observed() == 41268 &&
                    std::abs(s.missing_fraction() - 0.897) <= kOpenMicMissingTol && weak == 0;
  report(10, pass, "OpenMIC statistics",
         std::to_string(records.size()) + " records, " + std::to_string(s.observed()) + " observed, missing " +
             fmt(s.missing_fraction()) + ", " + std::to_string(weak) + " classes below the per-class floors");
}

}  // namespace

int main() {
  std::cerr << "running the synthetic sweep (" << kSweepSeeds << " seeds x 4 methods, 50 epochs)\n";
  const Sweep sweep = run_sweep();
  criterion1(sweep);
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7(sweep);
  criterion8();
  criterion9();
  criterion10();
  skip(11, "full-scale AST/OpenMIC reproduction", "non-gating; procedure documented in README");
  std::cout << (failures == 0 ? "acceptance: all gating criteria passed" : "acceptance: " + std::to_string(failures) +
                                                                               " criterion(s) failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
