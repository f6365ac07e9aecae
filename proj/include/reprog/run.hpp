#pragma once

// Run directories, report files and the data plumbing shared by the commands.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "reprog/config.hpp"
#include "reprog/dataio.hpp"
#include "reprog/error.hpp"
#include "reprog/metrics.hpp"
#include "reprog/training.hpp"

namespace reprog {

namespace fs = std::filesystem;

inline constexpr const char* kDataRootEnv = "REPROG_DATA_ROOT";
inline constexpr const char* kConfigDirEnv = "REPROG_CONFIG_DIR";

/// Process exit code for a library error: 2 configuration, 3 data, 4 numerical.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigInvalid:
    case ErrorCode::kBadThreshold:
    case ErrorCode::kFractionOutOfRange:
    case ErrorCode::kEpochOutOfRange:
    case ErrorCode::kBadDims:
    case ErrorCode::kEmptyAssignment:
    case ErrorCode::kIndexOutOfRange:
    case ErrorCode::kWeightsUnavailable:
      return 2;
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kNonFiniteInput:
    case ErrorCode::kNonFiniteSamples:
    case ErrorCode::kZeroStd:
    case ErrorCode::kZeroVariance:
      return 4;
    default:
      return 3;
  }
}

inline std::string read_file(const fs::path& path, ErrorCode missing = ErrorCode::kIo) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(missing, "cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
}

/// `name` is a config file path, or a preset looked up as <dir>/<name>.cfg in
/// $REPROG_CONFIG_DIR and then each of `search`.
inline fs::path resolve_config_path(const std::string& name, const std::vector<fs::path>& search = {}) {
  if (fs::is_regular_file(name)) return name;
  std::vector<fs::path> dirs;
  if (const char* env = std::getenv(kConfigDirEnv)) dirs.emplace_back(env);
  dirs.insert(dirs.end(), search.begin(), search.end());
  for (const auto& d : dirs) {
    const auto p = d / (name + ".cfg");
    if (fs::is_regular_file(p)) return p;
  }
  throw Error(ErrorCode::kConfigInvalid, "no config file or preset named '" + name + "'");
}

struct Dataset {
  std::vector<ClipRecord> records;
  Vocabulary vocab;
};

inline fs::path data_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return cfg.data.root;
}

/// Records as configured, before the validation carve-out.
inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.data.source == "synthetic") {
    return {generate_synthetic(cfg.data.synthetic), Vocabulary::numbered(cfg.data.synthetic.n_classes)};
  }
  const fs::path root = data_root(cfg);
  if (root.empty() || !fs::is_directory(root)) {
    throw Error(ErrorCode::kDatasetUnavailable,
                "dataset root '" + root.string() + "' not found (set data.root or " + kDataRootEnv + ")");
  }
  OpenMicLayout layout;
  layout.root = root;
  auto vocab = dataset_vocabulary(root);
  return {load_openmic(layout, cfg.data.pos_threshold, vocab), vocab};
}

/// Training records for one seed: TRAIN minus a seeded VAL carve-out, plus TEST.
inline Dataset dataset_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto ds = load_dataset(cfg);
  ds.records = make_validation_split(std::move(ds.records), cfg.data.val_fraction, derive_seed(seed, kSeedValSplit));
  return ds;
}

inline fs::path default_cache_dir(const ExperimentConfig& cfg) {
  if (!cfg.data.cache_dir.empty()) return cfg.data.cache_dir;
  if (cfg.data.source == "synthetic") return {};
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) return fs::path(xdg) / "reprog";
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "reprog";
  return {};
}

// ---------------------------------------------------------------------------
// Report files

inline std::string report_csv(const F1Breakdown& f1, const Vocabulary& vocab) {
  std::string out = "class,n_pos,n_neg,precision,recall,f1\n";
  for (std::size_t c = 0; c < f1.per_class.size(); ++c) {
    const auto& k = f1.per_class[c];
    out += vocab[c] + "," + std::to_string(k.positives()) + "," + std::to_string(k.negatives()) + "," +
           detail::format_double(k.precision) + "," + detail::format_double(k.recall) + "," +
           detail::format_double(k.f1) + "\n";
  }
  out += "macro,,,,," + detail::format_double(f1.macro_f1) + "\n";
  return out;
}

inline std::string report_text(const F1Breakdown& f1, const Vocabulary& vocab, const std::string& title) {
  std::ostringstream os;
  os << title << "\n\n";
  os << std::left << std::setw(20) << "class" << std::right << std::setw(7) << "n_pos" << std::setw(7) << "n_neg"
     << std::setw(11) << "precision" << std::setw(9) << "recall" << std::setw(9) << "f1" << "\n";
  os << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < f1.per_class.size(); ++c) {
    const auto& k = f1.per_class[c];
    os << std::left << std::setw(20) << vocab[c] << std::right << std::setw(7) << k.positives() << std::setw(7)
       << k.negatives() << std::setw(11) << k.precision << std::setw(9) << k.recall << std::setw(9) << k.f1 << "\n";
  }
  os << "\nmacro-F1 " << f1.macro_f1 << "\n";
  return os.str();
}

inline void write_report(const fs::path& dir, const F1Breakdown& f1, const Vocabulary& vocab, const std::string& title) {
  write_file(dir / "report.csv", report_csv(f1, vocab));
  write_file(dir / "report.txt", report_text(f1, vocab, title));
}

/// Per-class positives/negatives/missing, one row per class plus a total row.
inline std::string label_distribution_csv(const LabelStats& s, const Vocabulary& vocab) {
  std::string out = "class,positives,negatives,missing\n";
  std::size_t p = 0, n = 0, m = 0;
  for (std::size_t c = 0; c < s.per_class.size(); ++c) {
    const auto& k = s.per_class[c];
    out += vocab[c] + "," + std::to_string(k.positives) + "," + std::to_string(k.negatives) + "," +
           std::to_string(k.missing) + "\n";
    p += k.positives;
    n += k.negatives;
    m += k.missing;
  }
  out += "total," + std::to_string(p) + "," + std::to_string(n) + "," + std::to_string(m) + "\n";
  return out;
}

struct ReportRow {
  std::string name;
  std::size_t n_pos = 0, n_neg = 0;
  double f1 = 0;
};

struct ParsedReport {
  std::vector<ReportRow> classes;
  double macro_f1 = 0;
};

inline ParsedReport parse_report_csv(const std::string& text) {
  ParsedReport out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 6) throw Error(ErrorCode::kIo, "malformed report line '" + line + "'");
    if (f[0] == "macro") {
      out.macro_f1 = std::stod(f[5]);
      continue;
    }
    out.classes.push_back({f[0], std::stoul(f[1]), std::stoul(f[2]), std::stod(f[5])});
  }
  return out;
}

/// Report of a run directory: its own report.csv, or the per-class mean over
/// its seed_* subdirectories.
inline std::optional<ParsedReport> load_run_report(const fs::path& dir) {
  if (fs::is_regular_file(dir / "report.csv")) return parse_report_csv(read_file(dir / "report.csv"));
  std::vector<fs::path> subs;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0 &&
          fs::is_regular_file(e.path() / "report.csv")) {
        subs.push_back(e.path());
      }
    }
  }
  if (subs.empty()) return std::nullopt;
  std::sort(subs.begin(), subs.end());
  ParsedReport mean;
  for (const auto& s : subs) {
    auto r = parse_report_csv(read_file(s / "report.csv"));
    if (mean.classes.empty()) {
      mean.classes = r.classes;
      for (auto& c : mean.classes) c.f1 = 0;
    }
    if (r.classes.size() != mean.classes.size()) throw Error(ErrorCode::kIo, "seed reports disagree on classes");
    for (std::size_t c = 0; c < r.classes.size(); ++c) mean.classes[c].f1 += r.classes[c].f1 / static_cast<double>(subs.size());
    mean.macro_f1 += r.macro_f1 / static_cast<double>(subs.size());
  }
  return mean;
}

struct Comparison {
  std::string table_csv;
  std::string correlation_text;
};

/// Side-by-side per-class F1 across runs and, per run, the correlation between
/// class positive counts and class F1.
inline Comparison compare_runs(const std::vector<fs::path>& run_dirs) {
  std::vector<std::pair<std::string, ParsedReport>> runs;
  for (const auto& d : run_dirs) {
    if (auto r = load_run_report(d)) runs.emplace_back(d.filename().empty() ? d.parent_path().filename().string()
                                                                            : d.filename().string(),
                                                       std::move(*r));
  }
  if (runs.empty()) throw Error(ErrorCode::kNoRunsFound, "no report.csv under the given run directories");
  const auto& ref = runs.front().second.classes;
  for (const auto& [name, r] : runs) {
    if (r.classes.size() != ref.size()) throw Error(ErrorCode::kNoRunsFound, "run '" + name + "' has a different class set");
  }
  Comparison out;
  out.table_csv = "class,n_pos";
  for (const auto& [name, r] : runs) out.table_csv += "," + name;
  out.table_csv += "\n";
  for (std::size_t c = 0; c < ref.size(); ++c) {
    out.table_csv += ref[c].name + "," + std::to_string(ref[c].n_pos);
    for (const auto& [name, r] : runs) out.table_csv += "," + detail::format_double(r.classes[c].f1);
    out.table_csv += "\n";
  }
  out.table_csv += "macro,";
  for (const auto& [name, r] : runs) out.table_csv += "," + detail::format_double(r.macro_f1);
  out.table_csv += "\n";

  for (const auto& [name, r] : runs) {
    std::vector<double> pos, f1;
    for (const auto& c : r.classes) {
      pos.push_back(static_cast<double>(c.n_pos));
      f1.push_back(c.f1);
    }
    out.correlation_text += name + ": ";
    try {
      out.correlation_text += "pearson(n_pos, f1) = " + detail::format_double(positive_count_correlation(pos, f1)) + "\n";
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kZeroVariance) throw;
      out.correlation_text += "undefined (per-class positive counts or F1 scores are constant, so the correlation has a zero denominator)\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training runs

struct TrainOutcome {
  RepeatSummary summary;
  std::vector<fs::path> seed_dirs;
};

inline std::string metrics_header() { return "epoch,lr,train_loss,val_macro_f1\n"; }

inline std::string metrics_line(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + detail::format_double(m.lr) + "," + detail::format_double(m.train_loss) + "," +
         detail::format_double(m.val_macro_f1) + "\n";
}

/// Populates `out`: config.cfg first, then seed_<s>/ with metrics.csv, best.ckpt
/// and the TEST report for each repeat, then summary.csv / summary.txt.
/// Refuses to reuse a directory that already holds a run.
inline TrainOutcome run_training(const ExperimentConfig& cfg, const fs::path& out,
                                 const std::function<void(const std::string&)>& log = {}) {
  cfg.validate();
  if (fs::exists(out / "config.cfg")) {
    throw Error(ErrorCode::kIo, "run directory '" + out.string() + "' already holds a run");
  }
  fs::create_directories(out);
  write_file(out / "config.cfg", cfg.canonical_text());

  auto backbone = make_backbone<float>(cfg);
  const SpectrogramStore store(cfg.frontend, default_cache_dir(cfg));
  TrainOutcome outcome;
  std::vector<FitResult> results;
  std::string seeds;
  for (std::size_t r = 0; r < cfg.plan.repeats; ++r) {
    const std::uint64_t seed = cfg.plan.seed + r;
    seeds += std::to_string(seed) + "\n";
    write_file(out / "seeds.txt", seeds);
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    const auto ds = dataset_for_seed(cfg, seed);
    std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    metrics << metrics_header() << std::flush;
    auto res = fit<float>(cfg, ds.records, ds.vocab, store, backbone, seed, [&](const EpochMetrics& m) {
      metrics << metrics_line(m) << std::flush;
      if (log) {
        log("seed " + std::to_string(seed) + " epoch " + std::to_string(m.epoch) + " lr " + detail::format_double(m.lr) +
            " loss " + detail::format_double(m.train_loss) + " val " + detail::format_double(m.val_macro_f1));
      }
    });
    if (!metrics) throw Error(ErrorCode::kIo, "cannot write metrics log in '" + dir.string() + "'");
    write_container(dir / "best.ckpt", res.checkpoint);
    write_report(dir, res.test, ds.vocab,
                 system_name(cfg.reprogrammer) + " (" + std::string(kind_name(cfg.reprogrammer)) + " + " +
                     std::string(mapper_kind_name(cfg.mapper)) + "), seed " + std::to_string(seed) + ", split test");
    outcome.seed_dirs.push_back(dir);
    results.push_back(std::move(res));
  }
  outcome.summary = summarize(std::move(results));
  std::string csv = "seed,best_epoch,best_val_macro_f1,test_macro_f1\n";
  for (const auto& r : outcome.summary.runs) {
    csv += std::to_string(r.seed) + "," + std::to_string(r.best_epoch) + "," + detail::format_double(r.best_val_macro_f1) +
           "," + detail::format_double(r.test.macro_f1) + "\n";
  }
  write_file(out / "summary.csv", csv);
  write_file(out / "summary.txt", system_name(cfg.reprogrammer) + "\nrepeats " + std::to_string(cfg.plan.repeats) +
                                      "\ntrainable_params " + std::to_string(outcome.summary.runs.front().trainable_params) +
                                      "\ntest_macro_f1_mean " + detail::format_double(outcome.summary.mean_test_macro_f1) +
                                      "\ntest_macro_f1_std " + detail::format_double(outcome.summary.std_test_macro_f1) + "\n");
  return outcome;
}

struct EvalOutcome {
  F1Breakdown f1;
  Vocabulary vocab;
  std::string title;
};

/// Scores a checkpoint on one split, rebuilding the exact data split it was trained on.
inline EvalOutcome evaluate_checkpoint(const fs::path& ckpt_path, SplitTag split) {
  const Container ckpt = read_container(ckpt_path);
  const auto cfg = parse_config(ckpt.config_text);
  cfg.validate();
  const std::uint64_t seed = std::stoull(ckpt.meta_at("seed"));
  auto backbone = make_backbone<float>(cfg);
  const auto ds = dataset_for_seed(cfg, seed);
  auto model = restore_model<float>(ckpt, backbone, ds.vocab);
  const auto idx = split_indices(ds.records, split);
  if (idx.empty()) throw Error(ErrorCode::kEmptySplit, "no " + std::string(split_name(split)) + " records");
  const SpectrogramStore store(cfg.frontend, default_cache_dir(cfg));
  const auto f1 = score_predictions(predict_split(model, ds.records, idx, store, cfg.plan.batch_size), cfg.threshold);
  std::string title = system_name(cfg.reprogrammer) + " (" + std::string(kind_name(cfg.reprogrammer)) + " + " +
                      std::string(mapper_kind_name(cfg.mapper)) + "), seed " + std::to_string(seed) + ", split " +
                      std::string(split_name(split));
  if (cfg.reprogrammer == ReprogrammerKind::kIdentity) title += " [baseline]";
  return {f1, ds.vocab, title};
}

}  // namespace reprog
