#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reprog/error.hpp"
#include "reprog/labels.hpp"
#include "reprog/reprogrammer.hpp"

namespace reprog {

inline void check_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kBadThreshold, "threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
}

/// 1 iff prob >= threshold.
template <typename T>
std::vector<std::uint8_t> binarize(std::span<const T> probs, double threshold) {
  check_threshold(threshold);
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = static_cast<double>(probs[i]) >= threshold ? 1 : 0;
  return out;
}

struct ClassScore {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;

  std::size_t positives() const noexcept { return tp + fn; }
  std::size_t negatives() const noexcept { return fp + tn; }
};

struct F1Breakdown {
  std::vector<ClassScore> per_class;
  double macro_f1 = 0;
};

/// Per-class F1 over observed entries only; the macro score is the unweighted mean
/// over all classes. A class with no true positives scores 0.
inline F1Breakdown macro_f1(const std::vector<std::vector<std::uint8_t>>& preds,
                            const std::vector<TriStateLabelVector>& labels) {
  if (preds.size() != labels.size()) throw Error(ErrorCode::kLengthMismatch, "prediction/label count mismatch");
  if (preds.empty()) throw Error(ErrorCode::kEmptySplit, "no clips to score");
  const std::size_t C = labels.front().size();
  F1Breakdown out;
  out.per_class.resize(C);
  for (std::size_t n = 0; n < preds.size(); ++n) {
    if (preds[n].size() != C || labels[n].size() != C) {
      throw Error(ErrorCode::kLengthMismatch, "clip " + std::to_string(n) + " has wrong class count");
    }
    for (std::size_t c = 0; c < C; ++c) {
      const auto s = labels[n][c];
      if (s == LabelState::kMissing) continue;
      auto& k = out.per_class[c];
      const bool truth = s == LabelState::kPositive;
      const bool pred = preds[n][c] != 0;
      if (truth && pred) ++k.tp;
      else if (!truth && pred) ++k.fp;
      else if (truth && !pred) ++k.fn;
      else ++k.tn;
    }
  }
  double sum = 0;
  for (auto& k : out.per_class) {
    k.precision = k.tp + k.fp > 0 ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp) : 0.0;
    k.recall = k.tp + k.fn > 0 ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn) : 0.0;
    k.f1 = k.precision + k.recall > 0 ? 2 * k.precision * k.recall / (k.precision + k.recall) : 0.0;
    sum += k.f1;
  }
  out.macro_f1 = C > 0 ? sum / static_cast<double>(C) : 0.0;
  return out;
}

/// Pearson correlation between per-class positive counts and per-class F1.
inline double positive_count_correlation(std::span<const double> pos_counts, std::span<const double> f1s) {
  if (pos_counts.size() != f1s.size()) throw Error(ErrorCode::kLengthMismatch, "vectors differ in length");
  const std::size_t n = pos_counts.size();
  if (n < 2) throw Error(ErrorCode::kZeroVariance, "need at least two classes");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += pos_counts[i];
    my += f1s[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = pos_counts[i] - mx, dy = f1s[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::kZeroVariance, "correlation undefined for constant input");
  return sxy / std::sqrt(sxx * syy);
}

/// Reference budgets (millions of trainable parameters) reported for the
/// AST-based systems with an FC label mapping.
inline std::optional<double> reference_budget_millions(ReprogrammerKind kind) {
  switch (kind) {
    case ReprogrammerKind::kIdentity: return 0.017;
    case ReprogrammerKind::kNoise: return 0.148;
    case ReprogrammerKind::kCnn: return 0.017;
    case ReprogrammerKind::kUnet: return 0.018;
  }
  return std::nullopt;
}

/// Relative tolerance when comparing against the reference budgets.
inline constexpr double kBudgetBand = 0.30;

struct BudgetReport {
  struct Row {
    std::string component;
    std::size_t count = 0;
  };
  std::string system;
  std::vector<Row> rows;
  std::size_t total = 0;
  std::optional<double> reference;  // parameter count, not millions

  double relative_deviation() const {
    return reference ? (static_cast<double>(total) - *reference) / *reference : 0.0;
  }
  bool within_band() const { return reference && std::abs(relative_deviation()) <= kBudgetBand; }
};

inline std::string system_name(ReprogrammerKind kind) {
  switch (kind) {
    case ReprogrammerKind::kIdentity: return "AST-BS";
    case ReprogrammerKind::kNoise: return "AST-NRP";
    case ReprogrammerKind::kCnn: return "AST-CNNRP";
    case ReprogrammerKind::kUnet: return "AST-URP";
  }
  return "?";
}

inline BudgetReport budget_report(ReprogrammerKind kind, Dims dims, const ReprogrammerOptions& opts,
                                  std::size_t mapper_params, bool compare_reference = true) {
  BudgetReport r;
  r.system = system_name(kind);
  r.rows.push_back({"reprogrammer (" + std::string(kind_name(kind)) + ")", reprogrammer_param_count(kind, dims, opts)});
  r.rows.push_back({"label mapper", mapper_params});
  r.rows.push_back({"backbone (frozen)", 0});
  for (const auto& row : r.rows) r.total += row.count;
  if (compare_reference) {
    if (auto ref = reference_budget_millions(kind)) r.reference = *ref * 1e6;
  }
  return r;
}

}  // namespace reprog
