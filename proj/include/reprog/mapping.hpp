#pragma once

// Source-score to target-probability transforms.

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "reprog/error.hpp"
#include "reprog/labels.hpp"
#include "reprog/nn.hpp"
#include "reprog/rng.hpp"

namespace reprog {

template <typename T>
T sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

/// For each target class, the (non-empty) set of source indices it averages over.
struct ManyToOneAssignment {
  std::vector<std::vector<std::size_t>> sets;

  void validate(std::size_t k_src) const {
    for (std::size_t c = 0; c < sets.size(); ++c) {
      if (sets[c].empty()) {
        throw Error(ErrorCode::kEmptyAssignment, "target " + std::to_string(c) + " has no source classes");
      }
      for (auto k : sets[c]) {
        if (k >= k_src) {
          throw Error(ErrorCode::kIndexOutOfRange,
                      "source index " + std::to_string(k) + " >= " + std::to_string(k_src));
        }
      }
    }
  }
};

template <typename T>
std::vector<T> many_to_one_forward(std::span<const T> source_probs, const ManyToOneAssignment& a) {
  a.validate(source_probs.size());
  std::vector<T> out(a.sets.size());
  for (std::size_t c = 0; c < a.sets.size(); ++c) {
    T sum = 0;
    for (auto k : a.sets[c]) sum += source_probs[k];
    out[c] = sum / static_cast<T>(a.sets[c].size());
  }
  return out;
}

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

/// Parses `target_name: src, src, ...` lines. Sources are indices or, when
/// `source_vocab` is given, source class names. Blank lines and '#' comments are skipped.
inline ManyToOneAssignment parse_mapping(std::string_view text, const Vocabulary& targets, std::size_t k_src,
                                         const Vocabulary* source_vocab = nullptr) {
  ManyToOneAssignment a;
  a.sets.resize(targets.size());
  std::vector<bool> seen(targets.size(), false);
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto colon = body.find(':');
    if (colon == std::string::npos) {
      throw Error(ErrorCode::kConfigInvalid, "mapping line " + std::to_string(lineno) + ": missing ':'");
    }
    const std::string name = detail::trim(std::string_view(body).substr(0, colon));
    const std::size_t c = targets.find(name);
    if (c == targets.size()) {
      throw Error(ErrorCode::kUnknownInstrument, "mapping line " + std::to_string(lineno) + ": unknown target '" +
                                                     name + "'");
    }
    if (seen[c]) {
      throw Error(ErrorCode::kConfigInvalid, "mapping line " + std::to_string(lineno) + ": target '" + name +
                                                 "' listed twice");
    }
    seen[c] = true;
    std::set<std::size_t> unique;
    std::istringstream items(body.substr(colon + 1));
    std::string item;
    while (std::getline(items, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      std::size_t k = 0;
      if (source_vocab != nullptr && source_vocab->find(item) != source_vocab->size()) {
        k = source_vocab->find(item);
      } else {
        std::size_t used = 0;
        try {
          k = std::stoul(item, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != item.size()) {
          throw Error(ErrorCode::kConfigInvalid, "mapping line " + std::to_string(lineno) + ": bad source '" +
                                                     item + "'");
        }
      }
      if (k >= k_src) {
        throw Error(ErrorCode::kIndexOutOfRange, "mapping line " + std::to_string(lineno) + ": source index " +
                                                     std::to_string(k) + " out of range");
      }
      if (!unique.insert(k).second) {
        throw Error(ErrorCode::kConfigInvalid, "mapping line " + std::to_string(lineno) + ": duplicate source '" +
                                                   item + "'");
      }
      a.sets[c].push_back(k);
    }
  }
  a.validate(k_src);
  return a;
}

/// Trainable affine map K_src -> C followed by a sigmoid. Weights are stored
/// K_src x C row-major.
template <typename T>
struct FclMapper {
  std::size_t k_src = 0;
  std::size_t classes = 0;
  Parameter<T> weight;
  Parameter<T> bias;

  FclMapper() = default;
  FclMapper(std::size_t k, std::size_t c) : k_src(k), classes(c), weight("fcl.weight", {k, c}), bias("fcl.bias", {c}) {}

  /// Weights uniform in +-1/sqrt(k_src), bias zero.
  static FclMapper initialized(std::size_t k, std::size_t c, Rng& rng) {
    FclMapper m(k, c);
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));
    for (auto& w : m.weight.value) w = static_cast<T>(rng.uniform(-bound, bound));
    return m;
  }

  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }
};

template <typename T>
std::vector<T> fcl_logits(std::span<const T> scores, const FclMapper<T>& m) {
  if (scores.size() != m.k_src) throw Error(ErrorCode::kShapeMismatch, "fcl input length mismatch");
  std::vector<T> z(m.bias.value);
  for (std::size_t k = 0; k < m.k_src; ++k) {
    const T s = scores[k];
    const T* row = m.weight.value.data() + k * m.classes;
    for (std::size_t c = 0; c < m.classes; ++c) z[c] += row[c] * s;
  }
  return z;
}

template <typename T>
std::vector<T> fcl_forward(std::span<const T> scores, const FclMapper<T>& m) {
  for (T s : scores) {
    if (!std::isfinite(s)) throw Error(ErrorCode::kNonFiniteInput, "fcl input contains non-finite score");
  }
  auto z = fcl_logits(scores, m);
  for (auto& v : z) v = sigmoid(v);
  return z;
}

template <typename T>
struct FclGradient {
  std::vector<T> weight;  // K_src x C
  std::vector<T> bias;    // C
  std::vector<T> scores;  // K_src
};

/// Exact gradients of <upstream, fcl_forward(scores)>.
template <typename T>
FclGradient<T> fcl_gradient(std::span<const T> scores, const FclMapper<T>& m, std::span<const T> upstream) {
  if (upstream.size() != m.classes) throw Error(ErrorCode::kShapeMismatch, "fcl upstream length mismatch");
  const auto p = fcl_forward(scores, m);
  FclGradient<T> g;
  g.bias.resize(m.classes);
  for (std::size_t c = 0; c < m.classes; ++c) g.bias[c] = upstream[c] * p[c] * (T(1) - p[c]);
  g.weight.assign(m.k_src * m.classes, T(0));
  g.scores.assign(m.k_src, T(0));
  for (std::size_t k = 0; k < m.k_src; ++k) {
    const T* row = m.weight.value.data() + k * m.classes;
    T* grow = g.weight.data() + k * m.classes;
    T acc = 0;
    for (std::size_t c = 0; c < m.classes; ++c) {
      grow[c] = scores[k] * g.bias[c];
      acc += row[c] * g.bias[c];
    }
    g.scores[k] = acc;
  }
  return g;
}

enum class MapperKind { kManyToOne, kFcl };

inline MapperKind parse_mapper_kind(std::string_view s) {
  if (s == "fcl") return MapperKind::kFcl;
  if (s == "many_to_one") return MapperKind::kManyToOne;
  throw Error(ErrorCode::kConfigInvalid, "mapper.kind: unknown kind '" + std::string(s) + "'");
}

inline std::string_view mapper_kind_name(MapperKind k) { return k == MapperKind::kFcl ? "fcl" : "many_to_one"; }

/// Training-facing mapper: probabilities out, score gradients back.
template <typename T>
class Mapper {
 public:
  virtual ~Mapper() = default;
  virtual MapperKind kind() const = 0;
  virtual std::size_t classes() const = 0;
  virtual std::vector<T> forward(std::span<const T> scores) const = 0;
  /// Accumulates parameter gradients and returns d<upstream, forward>/d scores.
  virtual std::vector<T> backward(std::span<const T> scores, std::span<const T> upstream) = 0;
  virtual std::vector<Parameter<T>*> parameters() = 0;

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
  }
};

template <typename T>
class FclLabelMapper final : public Mapper<T> {
 public:
  explicit FclLabelMapper(FclMapper<T> m) : m_(std::move(m)) {}
  MapperKind kind() const override { return MapperKind::kFcl; }
  std::size_t classes() const override { return m_.classes; }
  FclMapper<T>& fcl() noexcept { return m_; }

  std::vector<T> forward(std::span<const T> scores) const override { return fcl_forward(scores, m_); }

  std::vector<T> backward(std::span<const T> scores, std::span<const T> upstream) override {
    auto g = fcl_gradient(scores, m_, upstream);
    for (std::size_t i = 0; i < g.weight.size(); ++i) m_.weight.grad[i] += g.weight[i];
    for (std::size_t i = 0; i < g.bias.size(); ++i) m_.bias.grad[i] += g.bias[i];
    return std::move(g.scores);
  }

  std::vector<Parameter<T>*> parameters() override { return {&m_.weight, &m_.bias}; }

 private:
  FclMapper<T> m_;
};

/// Sigmoid on each source score, then the per-target mean over its assigned sources.
template <typename T>
class ManyToOneMapper final : public Mapper<T> {
 public:
  ManyToOneMapper(ManyToOneAssignment a, std::size_t k_src) : a_(std::move(a)), k_src_(k_src) { a_.validate(k_src); }
  MapperKind kind() const override { return MapperKind::kManyToOne; }
  std::size_t classes() const override { return a_.sets.size(); }

  std::vector<T> forward(std::span<const T> scores) const override {
    std::vector<T> probs(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) probs[k] = sigmoid(scores[k]);
    return many_to_one_forward<T>(probs, a_);
  }

  std::vector<T> backward(std::span<const T> scores, std::span<const T> upstream) override {
    std::vector<T> g(scores.size(), T(0));
    for (std::size_t c = 0; c < a_.sets.size(); ++c) {
      const T share = upstream[c] / static_cast<T>(a_.sets[c].size());
      for (auto k : a_.sets[c]) g[k] += share;
    }
    for (std::size_t k = 0; k < scores.size(); ++k) {
      const T p = sigmoid(scores[k]);
      g[k] *= p * (T(1) - p);
    }
    return g;
  }

  std::vector<Parameter<T>*> parameters() override { return {}; }

 private:
  ManyToOneAssignment a_;
  std::size_t k_src_;
};

}  // namespace reprog
