#pragma once

// Experiment configuration: flat `dotted.key = value` text, one key per line.
// The canonical form lists every key in sorted order and is what runs echo
// into checkpoints and snapshots.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "reprog/backbone.hpp"
#include "reprog/bytes.hpp"
#include "reprog/dataio.hpp"
#include "reprog/error.hpp"
#include "reprog/frontend.hpp"
#include "reprog/mapping.hpp"
#include "reprog/reprogrammer.hpp"

namespace reprog {

struct TrainingPlan {
  std::size_t batch_size = 8;
  std::size_t total_epochs = 50;
  double lr0 = 5e-5;
  std::size_t warm_epochs = 10;
  std::size_t halve_every = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t repeats = 10;
};

struct BackboneConfig {
  std::string kind = "toy";  // toy | ast
  ToyBackboneOptions toy;
  std::string weights;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | openmic
  std::string root;
  std::string cache_dir;
  double val_fraction = 0.15;
  double pos_threshold = 0.5;
  SyntheticSpec synthetic;
};

struct ExperimentConfig {
  FrontendParams frontend;
  ReprogrammerKind reprogrammer = ReprogrammerKind::kUnet;
  ReprogrammerOptions reprogrammer_options;
  MapperKind mapper = MapperKind::kFcl;
  std::string mapping_file;
  BackboneConfig backbone;
  TrainingPlan plan;
  double threshold = 0.5;
  DataConfig data;

  Dims input_dims() const {
    if (data.source == "synthetic") return {data.synthetic.frames, data.synthetic.bands};
    return {frontend.target_frames, frontend.n_mels};
  }

  void validate() const;
  std::string canonical_text() const;
  std::uint64_t hash() const;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw Error(ErrorCode::kConfigInvalid, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw Error(ErrorCode::kConfigInvalid, key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorCode::kConfigInvalid, key + ": expected true/false, got '" + v + "'");
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto real = [&f](const std::string& key, auto member) {
      f[key] = {[member](const ExperimentConfig& c) { return format_double(member(c)); },
                [member, key](ExperimentConfig& c, const std::string& v) { member(c) = parse_double(key, v); }};
    };
    auto count = [&f](const std::string& key, auto member) {
      f[key] = {[member](const ExperimentConfig& c) { return std::to_string(member(c)); },
                [member, key](ExperimentConfig& c, const std::string& v) {
                  using U = std::remove_reference_t<decltype(member(c))>;
                  member(c) = parse_unsigned<U>(key, v);
                }};
    };
    auto text = [&f](const std::string& key, auto member) {
      f[key] = {[member](const ExperimentConfig& c) { return member(c); },
                [member](ExperimentConfig& c, const std::string& v) { member(c) = v; }};
    };
    real("frontend.win_ms", [](auto& c) -> auto& { return c.frontend.win_ms; });
    real("frontend.hop_ms", [](auto& c) -> auto& { return c.frontend.hop_ms; });
    real("frontend.norm_mean", [](auto& c) -> auto& { return c.frontend.norm_mean; });
    real("frontend.norm_std", [](auto& c) -> auto& { return c.frontend.norm_std; });
    real("frontend.sample_rate", [](auto& c) -> auto& { return c.frontend.sample_rate; });
    count("frontend.n_mels", [](auto& c) -> auto& { return c.frontend.n_mels; });
    count("frontend.target_frames", [](auto& c) -> auto& { return c.frontend.target_frames; });

    f["reprogrammer.kind"] = {[](const ExperimentConfig& c) { return std::string(kind_name(c.reprogrammer)); },
                              [](ExperimentConfig& c, const std::string& v) { c.reprogrammer = parse_reprogrammer_kind(v); }};
    count("reprogrammer.cnn_hidden", [](auto& c) -> auto& { return c.reprogrammer_options.cnn_hidden; });
    f["reprogrammer.cnn_relu"] = {
        [](const ExperimentConfig& c) { return std::string(c.reprogrammer_options.cnn_relu ? "true" : "false"); },
        [](ExperimentConfig& c, const std::string& v) { c.reprogrammer_options.cnn_relu = parse_bool("reprogrammer.cnn_relu", v); }};
    f["reprogrammer.unet_widths"] = {
        [](const ExperimentConfig& c) {
          const auto& w = c.reprogrammer_options.unet_widths;
          return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]);
        },
        [](ExperimentConfig& c, const std::string& v) {
          std::istringstream in(v);
          std::string item;
          std::vector<std::size_t> w;
          while (std::getline(in, item, ',')) w.push_back(parse_unsigned<std::size_t>("reprogrammer.unet_widths", trim(item)));
          if (w.size() != 3) throw Error(ErrorCode::kConfigInvalid, "reprogrammer.unet_widths: expected three widths");
          c.reprogrammer_options.unet_widths = {w[0], w[1], w[2]};
        }};

    f["mapper.kind"] = {[](const ExperimentConfig& c) { return std::string(mapper_kind_name(c.mapper)); },
                        [](ExperimentConfig& c, const std::string& v) { c.mapper = parse_mapper_kind(v); }};
    text("mapper.mapping_file", [](auto& c) -> auto& { return c.mapping_file; });

    text("backbone.kind", [](auto& c) -> auto& { return c.backbone.kind; });
    text("backbone.weights", [](auto& c) -> auto& { return c.backbone.weights; });
    count("backbone.seed", [](auto& c) -> auto& { return c.backbone.toy.seed; });
    count("backbone.k_src", [](auto& c) -> auto& { return c.backbone.toy.k_src; });
    real("backbone.input_mean", [](auto& c) -> auto& { return c.backbone.toy.input_mean; });
    real("backbone.input_gain", [](auto& c) -> auto& { return c.backbone.toy.input_gain; });
    real("backbone.bias_scale", [](auto& c) -> auto& { return c.backbone.toy.bias_scale; });

    count("train.batch_size", [](auto& c) -> auto& { return c.plan.batch_size; });
    count("train.epochs", [](auto& c) -> auto& { return c.plan.total_epochs; });
    real("train.lr0", [](auto& c) -> auto& { return c.plan.lr0; });
    count("train.warm_epochs", [](auto& c) -> auto& { return c.plan.warm_epochs; });
    count("train.halve_every", [](auto& c) -> auto& { return c.plan.halve_every; });
    count("train.seed", [](auto& c) -> auto& { return c.plan.seed; });
    count("train.repeats", [](auto& c) -> auto& { return c.plan.repeats; });

    real("eval.threshold", [](auto& c) -> auto& { return c.threshold; });

    text("data.source", [](auto& c) -> auto& { return c.data.source; });
    text("data.root", [](auto& c) -> auto& { return c.data.root; });
    text("data.cache_dir", [](auto& c) -> auto& { return c.data.cache_dir; });
    real("data.val_fraction", [](auto& c) -> auto& { return c.data.val_fraction; });
    real("data.pos_threshold", [](auto& c) -> auto& { return c.data.pos_threshold; });
    count("synthetic.n_clips", [](auto& c) -> auto& { return c.data.synthetic.n_clips; });
    count("synthetic.n_classes", [](auto& c) -> auto& { return c.data.synthetic.n_classes; });
    count("synthetic.frames", [](auto& c) -> auto& { return c.data.synthetic.frames; });
    count("synthetic.bands", [](auto& c) -> auto& { return c.data.synthetic.bands; });
    real("synthetic.positive_rate", [](auto& c) -> auto& { return c.data.synthetic.positive_rate; });
    real("synthetic.missing_rate", [](auto& c) -> auto& { return c.data.synthetic.missing_rate; });
    real("synthetic.label_noise", [](auto& c) -> auto& { return c.data.synthetic.label_noise; });
    real("synthetic.test_fraction", [](auto& c) -> auto& { return c.data.synthetic.test_fraction; });
    count("synthetic.seed", [](auto& c) -> auto& { return c.data.synthetic.seed; });
    real("synthetic.floor_level", [](auto& c) -> auto& { return c.data.synthetic.floor_level; });
    real("synthetic.level_jitter", [](auto& c) -> auto& { return c.data.synthetic.level_jitter; });
    real("synthetic.noise_std", [](auto& c) -> auto& { return c.data.synthetic.noise_std; });
    count("synthetic.blob_frames", [](auto& c) -> auto& { return c.data.synthetic.blob_frames; });
    real("synthetic.blob_level", [](auto& c) -> auto& { return c.data.synthetic.blob_level; });
    real("synthetic.ripple_amplitude", [](auto& c) -> auto& { return c.data.synthetic.ripple_amplitude; });
    count("synthetic.ripple_period", [](auto& c) -> auto& { return c.data.synthetic.ripple_period; });
    count("synthetic.clutter_bursts", [](auto& c) -> auto& { return c.data.synthetic.clutter_bursts; });
    count("synthetic.clutter_frames", [](auto& c) -> auto& { return c.data.synthetic.clutter_frames; });
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Applies one `key = value` assignment; unknown keys and bad values name the key.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw Error(ErrorCode::kConfigInvalid, "unknown configuration key '" + key + "'");
  it->second.set(c, value);
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::config_fields()) keys.push_back(k);
  return keys;
}

/// Parses config text over `base`. Later lines override earlier ones.
inline ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kConfigInvalid, "config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(base, detail::trim(std::string_view(body).substr(0, eq)),
                     detail::trim(std::string_view(body).substr(eq + 1)));
  }
  return base;
}

/// `key=value` overrides from the command line.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::kConfigInvalid, "override '" + assignment + "' lacks '='");
  set_config_value(c, detail::trim(std::string_view(assignment).substr(0, eq)),
                   detail::trim(std::string_view(assignment).substr(eq + 1)));
}

inline std::string ExperimentConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, field] : detail::config_fields()) out += k + " = " + field.get(*this) + "\n";
  return out;
}

inline std::uint64_t ExperimentConfig::hash() const {
  const auto text = canonical_text();
  Crc64 crc;
  crc.process_bytes(text.data(), text.size());
  return crc.checksum();
}

inline void ExperimentConfig::validate() const {
  frontend.validate();
  if (plan.batch_size == 0 || plan.total_epochs == 0 || plan.halve_every == 0 || plan.repeats == 0) {
    throw Error(ErrorCode::kConfigInvalid, "train.*: counts must be positive");
  }
  if (!(plan.lr0 > 0)) throw Error(ErrorCode::kConfigInvalid, "train.lr0 must be positive");
  if (!(threshold > 0 && threshold < 1)) throw Error(ErrorCode::kConfigInvalid, "eval.threshold must lie in (0, 1)");
  if (backbone.kind != "toy" && backbone.kind != "ast") {
    throw Error(ErrorCode::kConfigInvalid, "backbone.kind: expected toy or ast, got '" + backbone.kind + "'");
  }
  if (data.source != "synthetic" && data.source != "openmic") {
    throw Error(ErrorCode::kConfigInvalid, "data.source: expected synthetic or openmic, got '" + data.source + "'");
  }
  if (!(data.val_fraction > 0 && data.val_fraction < 1)) {
    throw Error(ErrorCode::kConfigInvalid, "data.val_fraction must lie in (0, 1)");
  }
  if (data.source == "synthetic") data.synthetic.validate();
  if (backbone.toy.k_src == 0) throw Error(ErrorCode::kConfigInvalid, "backbone.k_src must be positive");
  const Dims d = input_dims();
  if (reprogrammer == ReprogrammerKind::kUnet && (d.frames % 8 != 0 || d.bands % 8 != 0)) {
    throw Error(ErrorCode::kConfigInvalid, "reprogrammer.kind: unet needs input dims divisible by 8, got " + to_string(d));
  }
  if (mapper == MapperKind::kManyToOne && mapping_file.empty()) {
    throw Error(ErrorCode::kConfigInvalid, "mapper.mapping_file is required for mapper.kind = many_to_one");
  }
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kConfigInvalid, "cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace reprog
