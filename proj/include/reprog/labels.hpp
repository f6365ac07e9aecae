#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "reprog/error.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

enum class LabelState : std::uint8_t { kNegative = 0, kPositive = 1, kMissing = 2 };

inline std::string_view label_state_token(LabelState s) {
  switch (s) {
    case LabelState::kNegative: return "NEG";
    case LabelState::kPositive: return "POS";
    case LabelState::kMissing: return "MISS";
  }
  return "?";
}

inline LabelState parse_label_state(std::string_view token) {
  if (token == "POS" || token == "1" || token == "+") return LabelState::kPositive;
  if (token == "NEG" || token == "0" || token == "-") return LabelState::kNegative;
  if (token == "MISS" || token == "?" || token == "") return LabelState::kMissing;
  throw Error(ErrorCode::kInvalidState, "unknown label token '" + std::string(token) + "'");
}

inline bool is_valid_state(LabelState s) {
  return s == LabelState::kNegative || s == LabelState::kPositive || s == LabelState::kMissing;
}

using TriStateLabelVector = std::vector<LabelState>;

/// Ordered, duplicate-free class names.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {
    std::unordered_set<std::string> seen;
    for (const auto& n : names_) {
      if (!seen.insert(n).second) {
        throw Error(ErrorCode::kConfigInvalid, "duplicate class name '" + n + "'");
      }
    }
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& operator[](std::size_t i) const { return names_[i]; }

  /// Index of `name`, or size() when absent.
  std::size_t find(std::string_view name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    return static_cast<std::size_t>(it - names_.begin());
  }

  static Vocabulary numbered(std::size_t n, std::string_view prefix = "class") {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(std::string(prefix) + std::to_string(i));
    return Vocabulary(std::move(names));
  }

 private:
  std::vector<std::string> names_;
};

/// The 20 OpenMIC instruments in lexicographic order; the single source of class order.
inline const Vocabulary& openmic_vocabulary() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> names = {
        "accordion", "banjo",  "bass",    "cello",   "clarinet",  "cymbals",   "drums",
        "flute",     "guitar", "mallet_percussion", "mandolin", "organ", "piano", "saxophone",
        "synthesizer", "trombone", "trumpet", "ukulele", "violin", "voice"};
    std::sort(names.begin(), names.end());
    return Vocabulary(std::move(names));
  }();
  return vocab;
}

inline const TriStateLabelVector& validate_labels(const TriStateLabelVector& v, const Vocabulary& vocab) {
  if (v.size() != vocab.size()) {
    throw Error(ErrorCode::kLengthMismatch, "label vector has " + std::to_string(v.size()) +
                                                " entries, vocabulary has " + std::to_string(vocab.size()));
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!is_valid_state(v[i])) {
      throw Error(ErrorCode::kInvalidState, "entry " + std::to_string(i) + " is not a label state");
    }
  }
  return v;
}

/// Dense view of a tri-state vector. Targets at masked positions are stored as 0.
struct ObservedMask {
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> target;

  std::size_t observed() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

inline ObservedMask observed_mask(const TriStateLabelVector& v) {
  ObservedMask out;
  out.mask.reserve(v.size());
  out.target.reserve(v.size());
  for (auto s : v) {
    out.mask.push_back(s == LabelState::kMissing ? 0 : 1);
    out.target.push_back(s == LabelState::kPositive ? 1 : 0);
  }
  return out;
}

enum class SplitTag : std::uint8_t { kTrain, kVal, kTest };

inline std::string_view split_name(SplitTag t) {
  switch (t) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
  }
  return "?";
}

inline SplitTag parse_split(std::string_view s) {
  if (s == "train" || s == "TRAIN") return SplitTag::kTrain;
  if (s == "val" || s == "VAL") return SplitTag::kVal;
  if (s == "test" || s == "TEST") return SplitTag::kTest;
  throw Error(ErrorCode::kConfigInvalid, "unknown split '" + std::string(s) + "'");
}

/// One clip. The spectrogram is either held in memory or resolved from `source_path`
/// by the data layer.
struct ClipRecord {
  std::string clip_id;
  std::filesystem::path source_path;
  std::shared_ptr<const Spectrogram<float>> spectrogram;
  TriStateLabelVector labels;
  SplitTag split = SplitTag::kTrain;
};

}  // namespace reprog
