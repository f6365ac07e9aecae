#pragma once

// Dataset loading (OpenMIC layout), validation splitting, label statistics and
// the planted-pattern synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "reprog/bytes.hpp"
#include "reprog/container.hpp"
#include "reprog/error.hpp"
#include "reprog/frontend.hpp"
#include "reprog/labels.hpp"
#include "reprog/rng.hpp"

namespace reprog {

// ---------------------------------------------------------------------------
// Label statistics

struct ClassCounts {
  std::size_t positives = 0, negatives = 0, missing = 0;
  std::size_t observed() const noexcept { return positives + negatives; }
};

struct LabelStats {
  std::vector<ClassCounts> per_class;
  std::size_t clips = 0;
  std::size_t positives = 0, negatives = 0, missing = 0;

  std::size_t observed() const noexcept { return positives + negatives; }
  double missing_fraction() const {
    const double total = static_cast<double>(clips * per_class.size());
    return total > 0 ? 1.0 - static_cast<double>(observed()) / total : 0.0;
  }
};

inline LabelStats label_stats(const std::vector<ClipRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::kEmptySplit, "label statistics need at least one record");
  LabelStats s;
  s.clips = records.size();
  s.per_class.resize(records.front().labels.size());
  for (const auto& r : records) {
    if (r.labels.size() != s.per_class.size()) throw Error(ErrorCode::kLengthMismatch, "ragged label vectors");
    for (std::size_t c = 0; c < r.labels.size(); ++c) {
      switch (r.labels[c]) {
        case LabelState::kPositive: ++s.per_class[c].positives; ++s.positives; break;
        case LabelState::kNegative: ++s.per_class[c].negatives; ++s.negatives; break;
        case LabelState::kMissing: ++s.per_class[c].missing; ++s.missing; break;
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Splits

/// Retags floor(fraction * |TRAIN|) training records as VAL by seeded sampling
/// without replacement (unstratified). TEST records are untouched.
inline std::vector<ClipRecord> make_validation_split(std::vector<ClipRecord> records, double fraction,
                                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(ErrorCode::kFractionOutOfRange, "validation fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == SplitTag::kTrain) train.push_back(i);
  }
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train.size())));
  Rng rng(seed);
  rng.shuffle(train.begin(), train.end());
  for (std::size_t j = 0; j < k; ++j) records[train[j]].split = SplitTag::kVal;
  return records;
}

inline std::vector<std::size_t> split_indices(const std::vector<ClipRecord>& records, SplitTag tag) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == tag) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// OpenMIC layout

struct OpenMicLayout {
  std::filesystem::path root;
  std::filesystem::path label_table = "openmic-2018-aggregated-labels.csv";
  std::filesystem::path train_split = "partitions/split01_train.csv";
  std::filesystem::path test_split = "partitions/split01_test.csv";
  std::filesystem::path audio_dir = "audio";
  std::filesystem::path spectrogram_dir = "spectrograms";

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : root / p; }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') cur += ch;
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::string> read_key_list(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kMissingSplitFile, "split file '" + path.string() + "' not found");
  std::vector<std::string> keys;
  std::string line;
  while (std::getline(f, line)) {
    auto fields = split_csv_line(line);
    std::string key = fields.empty() ? "" : fields.front();
    key.erase(std::remove_if(key.begin(), key.end(), [](unsigned char c) { return std::isspace(c); }), key.end());
    if (!key.empty() && key != "sample_key") keys.push_back(key);
  }
  return keys;
}

/// Precomputed spectrogram first, then audio with any known extension.
inline std::filesystem::path resolve_clip(const OpenMicLayout& layout, const std::string& key) {
  const auto spec = layout.resolve(layout.spectrogram_dir) / (key + ".rpm");
  if (std::filesystem::exists(spec)) return spec;
  const auto dir = layout.resolve(layout.audio_dir) / key.substr(0, 3);
  for (const char* ext : {".ogg", ".wav", ".flac", ".mp3"}) {
    auto p = dir / (key + ext);
    if (std::filesystem::exists(p)) return p;
  }
  const auto flat = layout.resolve(layout.audio_dir) / (key + ".wav");
  if (std::filesystem::exists(flat)) return flat;
  return {};
}

}  // namespace detail

/// Tri-state records for every key in the split files, ordered by sorted key.
/// (clip, instrument) pairs with a relevance entry become POSITIVE when
/// relevance >= pos_threshold, otherwise NEGATIVE; absent pairs are MISSING.
inline std::vector<ClipRecord> load_openmic(const OpenMicLayout& layout, double pos_threshold,
                                            const Vocabulary& vocab = openmic_vocabulary()) {
  const auto train = detail::read_key_list(layout.resolve(layout.train_split));
  const auto test = detail::read_key_list(layout.resolve(layout.test_split));
  std::map<std::string, SplitTag> tags;
  for (const auto& k : train) tags[k] = SplitTag::kTrain;
  for (const auto& k : test) {
    if (tags.count(k)) throw Error(ErrorCode::kDatasetUnavailable, "key '" + k + "' in both train and test splits");
    tags[k] = SplitTag::kTest;
  }
  std::map<std::string, std::size_t> index;
  std::vector<ClipRecord> records;
  records.reserve(tags.size());
  for (const auto& [key, tag] : tags) {
    ClipRecord r;
    r.clip_id = key;
    r.split = tag;
    r.labels.assign(vocab.size(), LabelState::kMissing);
    r.source_path = detail::resolve_clip(layout, key);
    if (r.source_path.empty()) throw Error(ErrorCode::kUnresolvedAudio, "no audio for sample key '" + key + "'");
    index[key] = records.size();
    records.push_back(std::move(r));
  }
  const auto table_path = layout.resolve(layout.label_table);
  std::ifstream f(table_path);
  if (!f) throw Error(ErrorCode::kDatasetUnavailable, "label table '" + table_path.string() + "' not found");
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorCode::kDatasetUnavailable, "empty label table");
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::kDatasetUnavailable, "label table lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t ck = column("sample_key"), ci = column("instrument"), cr = column("relevance");
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() <= std::max({ck, ci, cr})) {
      throw Error(ErrorCode::kDatasetUnavailable, "label table line " + std::to_string(lineno) + " is short");
    }
    const std::size_t c = vocab.find(fields[ci]);
    if (c == vocab.size()) {
      throw Error(ErrorCode::kUnknownInstrument, "label table line " + std::to_string(lineno) + ": '" + fields[ci] + "'");
    }
    const double rel = std::stod(fields[cr]);
    if (!(rel >= 0.0 && rel <= 1.0)) {
      throw Error(ErrorCode::kDatasetUnavailable, "label table line " + std::to_string(lineno) + ": relevance outside [0,1]");
    }
    auto it = index.find(fields[ck]);
    if (it == index.end()) continue;  // clip outside both splits
    records[it->second].labels[c] = rel >= pos_threshold ? LabelState::kPositive : LabelState::kNegative;
  }
  return records;
}

// ---------------------------------------------------------------------------
// Spectrogram resolution and caching

/// Resolves record spectrograms: in-memory first, then precomputed `.rpm`
/// matrices, then audio through the frontend with an optional on-disk cache
/// keyed by the frontend configuration hash. The dataset root is never written.
class SpectrogramStore {
 public:
  SpectrogramStore(FrontendParams params, std::filesystem::path cache_dir)
      : params_(params), cache_dir_(std::move(cache_dir)) {}

  std::string frontend_hash() const {
    ByteWriter w;
    w.put(static_cast<std::uint64_t>(params_.n_mels));
    w.put(params_.win_ms);
    w.put(params_.hop_ms);
    w.put(static_cast<std::uint64_t>(params_.target_frames));
    w.put(params_.norm_mean);
    w.put(params_.norm_std);
    w.put(params_.sample_rate);
    Crc64 crc;
    crc.process_bytes(w.bytes().data(), w.bytes().size());
    return hex64(crc.checksum());
  }

  std::shared_ptr<const Spectrogram<float>> get(const ClipRecord& r) const {
    if (r.spectrogram) return r.spectrogram;
    if (r.source_path.extension() == ".rpm") {
      return std::make_shared<const Spectrogram<float>>(read_matrix(r.source_path), params_.hop_ms);
    }
    std::filesystem::path cached;
    if (!cache_dir_.empty()) {
      cached = cache_dir_ / frontend_hash() / (r.clip_id + ".rpm");
      if (std::filesystem::exists(cached)) {
        return std::make_shared<const Spectrogram<float>>(read_matrix(cached), params_.hop_ms);
      }
    }
    auto audio = resample_linear(AudioDecoders::instance().decode(r.source_path), params_.sample_rate);
    auto spec = std::make_shared<const Spectrogram<float>>(
        frontend_pipeline<float>(audio.samples, audio.sample_rate, params_));
    if (!cached.empty()) write_matrix(cached, spec->values, "spectrogram " + frontend_hash());
    return spec;
  }

 private:
  FrontendParams params_;
  std::filesystem::path cache_dir_;
};

// ---------------------------------------------------------------------------
// Planted-pattern synthetic data

/// Each class owns a disjoint band of mel rows. A positive clip carries that
/// class's blob at a random time offset: a small level shift plus a zero-mean
/// ripple along time. Background is a per-clip level plus white noise, and
/// optionally short clutter bursts with the blob's texture in every band.
struct SyntheticSpec {
  std::size_t n_clips = 2000;
  std::size_t n_classes = 4;
  std::size_t frames = 128;
  std::size_t bands = 128;
  double positive_rate = 0.4;
  double missing_rate = 0.5;
  double label_noise = 0.0;
  double test_fraction = 0.25;
  std::uint64_t seed = 1;

  double floor_level = -6.0;      // background mean (log units)
  double level_jitter = 1.0;      // std of the per-clip background offset
  double noise_std = 1.0;         // white background noise
  std::size_t blob_frames = 32;   // blob extent along time
  double blob_level = 0.5;        // mean shift inside the blob
  double ripple_amplitude = 1.5;  // ripple amplitude inside the blob
  std::size_t ripple_period = 4;  // frames per ripple cycle
  std::size_t clutter_bursts = 0; // per band and clip, uniform in [0, clutter_bursts]
  std::size_t clutter_frames = 8; // burst extent along time

  void validate() const {
    if (n_clips == 0 || n_classes == 0 || frames == 0 || bands == 0) {
      throw Error(ErrorCode::kConfigInvalid, "synthetic sizes must be positive");
    }
    if (frames % 8 != 0 || bands % 8 != 0) throw Error(ErrorCode::kConfigInvalid, "synthetic dims must be divisible by 8");
    if (bands / n_classes == 0) throw Error(ErrorCode::kConfigInvalid, "too many classes for the band count");
    if (blob_frames == 0 || blob_frames > frames) throw Error(ErrorCode::kConfigInvalid, "blob_frames out of range");
    for (double p : {positive_rate, missing_rate, label_noise}) {
      if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::kConfigInvalid, "synthetic rates must lie in [0, 1]");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error(ErrorCode::kConfigInvalid, "test_fraction must lie in (0, 1)");
    if (ripple_period == 0) throw Error(ErrorCode::kConfigInvalid, "ripple_period must be positive");
    if (clutter_frames == 0 || clutter_frames > frames) throw Error(ErrorCode::kConfigInvalid, "clutter_frames out of range");
  }

  /// Mel rows [first, last) owned by class c.
  std::pair<std::size_t, std::size_t> band_of(std::size_t c) const {
    const std::size_t height = bands / n_classes;
    return {c * height, (c + 1) * height};
  }
};

struct SyntheticClipTruth {
  std::vector<bool> present;
  std::vector<std::size_t> onset;
};

/// Deterministic given spec.seed. Returns records tagged TRAIN/TEST; the
/// optional `truth` receives the unmasked presence and blob onsets.
inline std::vector<ClipRecord> generate_synthetic(const SyntheticSpec& spec,
                                                  std::vector<SyntheticClipTruth>* truth = nullptr) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<ClipRecord> records;
  records.reserve(spec.n_clips);
  if (truth) truth->clear();
  const std::size_t digits = std::to_string(spec.n_clips).size();
  // level shift plus time ripple over rows [t0, t0 + len) of mel columns [lo, hi)
  auto place = [&spec](Matrix<float>& x, std::size_t lo, std::size_t hi, std::size_t t0, std::size_t len, double phase) {
    for (std::size_t dt = 0; dt < len; ++dt) {
      const double ripple =
          spec.ripple_amplitude *
          std::cos(2.0 * std::numbers::pi * static_cast<double>(dt) / static_cast<double>(spec.ripple_period) + phase);
      const auto add = static_cast<float>(spec.blob_level + ripple);
      for (std::size_t f = lo; f < hi; ++f) x(t0 + dt, f) += add;
    }
  };
  for (std::size_t n = 0; n < spec.n_clips; ++n) {
    Matrix<float> x(spec.frames, spec.bands);
    const double level = spec.floor_level + spec.level_jitter * rng.normal();
    for (auto& v : x.span()) v = static_cast<float>(level + spec.noise_std * rng.normal());
    SyntheticClipTruth t;
    ClipRecord r;
    std::string id = std::to_string(n);
    r.clip_id = "synth_" + std::string(digits - id.size(), '0') + id;
    r.labels.resize(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      const bool present = rng.bernoulli(spec.positive_rate);
      const auto onset = static_cast<std::size_t>(rng.below(spec.frames - spec.blob_frames + 1));
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      t.present.push_back(present);
      t.onset.push_back(onset);
      const auto [lo, hi] = spec.band_of(c);
      if (present) place(x, lo, hi, onset, spec.blob_frames, phase);
      const auto bursts = rng.below(spec.clutter_bursts + 1);
      for (std::uint64_t b = 0; b < bursts; ++b) {
        const auto at = static_cast<std::size_t>(rng.below(spec.frames - spec.clutter_frames + 1));
        place(x, lo, hi, at, spec.clutter_frames, rng.uniform(0.0, 2.0 * std::numbers::pi));
      }
      bool observed_truth = present;
      if (rng.bernoulli(spec.label_noise)) observed_truth = !observed_truth;
      const bool missing = rng.bernoulli(spec.missing_rate);
      r.labels[c] = missing ? LabelState::kMissing : (observed_truth ? LabelState::kPositive : LabelState::kNegative);
    }
    r.split = rng.bernoulli(spec.test_fraction) ? SplitTag::kTest : SplitTag::kTrain;
    r.spectrogram = std::make_shared<const Spectrogram<float>>(std::move(x), 10.0);
    records.push_back(std::move(r));
    if (truth) truth->push_back(std::move(t));
  }
  return records;
}

/// Writes records in the OpenMIC-style layout with precomputed spectrograms.
inline void write_dataset(const std::filesystem::path& root, const std::vector<ClipRecord>& records,
                          const Vocabulary& vocab) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "partitions");
  fs::create_directories(root / "spectrograms");
  std::ofstream labels(root / "openmic-2018-aggregated-labels.csv");
  std::ofstream train(root / "partitions/split01_train.csv");
  std::ofstream test(root / "partitions/split01_test.csv");
  labels << "sample_key,instrument,relevance\n";
  for (const auto& r : records) {
    (r.split == SplitTag::kTest ? test : train) << r.clip_id << "\n";
    for (std::size_t c = 0; c < r.labels.size(); ++c) {
      if (r.labels[c] == LabelState::kMissing) continue;
      labels << r.clip_id << "," << vocab[c] << "," << (r.labels[c] == LabelState::kPositive ? "1.0" : "0.0") << "\n";
    }
    if (!r.spectrogram) throw Error(ErrorCode::kDatasetUnavailable, "record '" + r.clip_id + "' has no spectrogram");
    write_matrix(root / "spectrograms" / (r.clip_id + ".rpm"), r.spectrogram->values, "spectrogram");
  }
  std::ofstream vocab_file(root / "vocabulary.txt");
  for (const auto& name : vocab.names()) vocab_file << name << "\n";
  if (!labels || !train || !test || !vocab_file) throw Error(ErrorCode::kIo, "cannot write dataset under '" + root.string() + "'");
}

/// Reads `vocabulary.txt` when present, otherwise the OpenMIC instruments.
inline Vocabulary dataset_vocabulary(const std::filesystem::path& root) {
  std::ifstream f(root / "vocabulary.txt");
  if (!f) return openmic_vocabulary();
  std::vector<std::string> names;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) names.push_back(line);
  }
  return Vocabulary(std::move(names));
}

}  // namespace reprog
