// reprog: command-line entry points for training, evaluation and reporting.

#include <CLI11.hpp>

#include <iostream>

#include "reprog/run.hpp"

namespace {

using namespace reprog;

#ifndef REPROG_SOURCE_DIR
#define REPROG_SOURCE_DIR "."
#endif

std::vector<fs::path> preset_dirs() { return {"configs", fs::path(REPROG_SOURCE_DIR) / "configs"}; }

ExperimentConfig load_with_overrides(const std::string& config, const std::vector<std::string>& sets) {
  ExperimentConfig cfg = load_config_file(resolve_config_path(config, preset_dirs()));
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
              std::optional<std::size_t> repeats, const std::string& out, bool quiet) {
  auto cfg = load_with_overrides(config, sets);
  if (seed) cfg.plan.seed = *seed;
  if (repeats) cfg.plan.repeats = *repeats;
  cfg.validate();
  auto outcome = run_training(cfg, out, [quiet](const std::string& line) {
    if (!quiet) std::cerr << line << "\n";
  });
  const auto& s = outcome.summary;
  std::cout << system_name(cfg.reprogrammer) << " test macro-F1 mean " << detail::format_double(s.mean_test_macro_f1)
            << " std " << detail::format_double(s.std_test_macro_f1) << " over " << s.runs.size() << " run(s)\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& out) {
  const auto tag = parse_split(split);
  const auto r = evaluate_checkpoint(checkpoint, tag);
  const fs::path dir = out.empty() ? fs::path(checkpoint).parent_path() / ("eval_" + split) : fs::path(out);
  write_report(dir, r.f1, r.vocab, r.title);
  std::cout << r.title << "\nmacro-F1 " << detail::format_double(r.f1.macro_f1) << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& dataset, const std::string& config,
               const std::vector<std::string>& sets, const std::string& out) {
  if (!dataset.empty() || !config.empty()) {
    ExperimentConfig cfg;
    if (!config.empty()) cfg = load_with_overrides(config, sets);
    if (!dataset.empty()) {
      cfg.data.source = "openmic";
      cfg.data.root = dataset;
    }
    const auto ds = load_dataset(cfg);
    const auto stats = label_stats(ds.records);
    const auto csv = label_distribution_csv(stats, ds.vocab);
    std::cout << csv << "missing_fraction," << detail::format_double(stats.missing_fraction()) << "\n";
    if (!out.empty()) write_file(fs::path(out) / "label_distribution.csv", csv);
  }
  if (!runs.empty()) {
    std::vector<fs::path> dirs(runs.begin(), runs.end());
    const auto cmp = compare_runs(dirs);
    std::cout << cmp.table_csv << "\n" << cmp.correlation_text;
    if (!out.empty()) {
      write_file(fs::path(out) / "comparison.csv", cmp.table_csv);
      write_file(fs::path(out) / "correlation.txt", cmp.correlation_text);
    }
  }
  if (runs.empty() && dataset.empty() && config.empty()) {
    throw Error(ErrorCode::kNoRunsFound, "give run directories, --dataset or --config");
  }
  return 0;
}

int cmd_count_params(const std::string& config, const std::vector<std::string>& sets) {
  const auto cfg = load_with_overrides(config, sets);
  cfg.validate();
  const Dims dims = cfg.input_dims();
  const std::size_t k_src = cfg.backbone.kind == "ast" ? AstAdapter<float>::kSourceClasses : cfg.backbone.toy.k_src;
  const std::size_t mapper = mapper_param_count(cfg, k_src, class_count(cfg));
  const auto rep = budget_report(cfg.reprogrammer, dims, cfg.reprogrammer_options, mapper);
  std::cout << rep.system << "  input " << to_string(dims) << "  K_src " << k_src << "  C " << class_count(cfg) << "\n";
  for (const auto& row : rep.rows) std::cout << "  " << std::left << std::setw(24) << row.component << std::right
                                             << std::setw(10) << row.count << "\n";
  std::cout << "  " << std::left << std::setw(24) << "total" << std::right << std::setw(10) << rep.total << "\n";
  if (rep.reference && cfg.backbone.kind == "ast") {
    std::cout << "  reference " << static_cast<std::size_t>(*rep.reference) << ", deviation " << std::fixed
              << std::setprecision(1) << 100.0 * rep.relative_deviation() << "% ("
              << (rep.within_band() ? "within" : "outside") << " +-" << static_cast<int>(kBudgetBand * 100) << "%)\n";
  }
  return 0;
}

int cmd_synth_data(const std::string& config, const std::vector<std::string>& sets, const std::string& out) {
  ExperimentConfig cfg;
  if (!config.empty()) cfg = load_with_overrides(config, sets);
  else for (const auto& s : sets) apply_override(cfg, s);
  cfg.data.synthetic.validate();
  const auto records = generate_synthetic(cfg.data.synthetic);
  write_dataset(out, records, Vocabulary::numbered(cfg.data.synthetic.n_classes));
  std::cout << "wrote " << records.size() << " clips to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model reprogramming for multi-label instrument recognition"};
  app.require_subcommand(1);

  std::string config, out, split = "test", checkpoint, dataset;
  std::vector<std::string> sets, runs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> repeats;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Train a reprogrammer and label mapper");
  train->add_option("--config", config, "Config file or preset name")->required();
  train->add_option("--set", sets, "key=value override (repeatable)");
  train->add_option("--seed", seed, "First seed");
  train->add_option("--repeats", repeats, "Number of seeds");
  train->add_option("--out", out, "Run directory")->required();
  train->add_flag("--quiet", quiet, "No per-epoch progress");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on one split");
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "train | val | test");
  eval->add_option("--out", out, "Report directory (default: next to the checkpoint)");

  auto* report = app.add_subcommand("report", "Label distribution and per-class comparison across runs");
  report->add_option("runs", runs, "Run directories to compare");
  report->add_option("--dataset", dataset, "OpenMIC-layout dataset root for the label distribution");
  report->add_option("--config", config, "Config whose dataset to describe");
  report->add_option("--set", sets, "key=value override (repeatable)");
  report->add_option("--out", out, "Directory for the emitted tables");

  auto* count = app.add_subcommand("count-params", "Trainable-parameter budget for a config");
  count->add_option("--config", config, "Config file or preset name")->required();
  count->add_option("--set", sets, "key=value override (repeatable)");

  auto* synth = app.add_subcommand("synth-data", "Write the planted-pattern dataset in OpenMIC layout");
  synth->add_option("--config", config, "Config file or preset name");
  synth->add_option("--set", sets, "key=value override (repeatable)");
  synth->add_option("--out", out, "Dataset root")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(config, sets, seed, repeats, out, quiet);
    if (*eval) return cmd_eval(checkpoint, split, out);
    if (*report) return cmd_report(runs, dataset, config, sets, out);
    if (*count) return cmd_count_params(config, sets);
    if (*synth) return cmd_synth_data(config, sets, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
