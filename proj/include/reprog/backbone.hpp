#pragma once

// Frozen scorers. Gradients may flow through a backbone to its input, but no
// operation on this interface can change backbone parameters.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reprog/bytes.hpp"
#include "reprog/error.hpp"
#include "reprog/rng.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

template <typename T>
class FrozenBackbone {
 public:
  virtual ~FrozenBackbone() = default;

  virtual Dims input_dims() const = 0;
  virtual std::size_t k_src() const = 0;

  /// Pre-activation source-class scores.
  virtual std::vector<T> score(const Matrix<T>& x) const = 0;

  /// Gradient of <upstream, score(x)> with respect to x.
  virtual Matrix<T> backprop_input(const Matrix<T>& x, std::span<const T> upstream) const = 0;

  /// Checksum over all internal parameters in canonical order.
  virtual std::uint64_t fingerprint() const = 0;

 protected:
  void check_shape(const Matrix<T>& x) const {
    const auto d = input_dims();
    if (x.rows() != d.frames || x.cols() != d.bands) {
      throw Error(ErrorCode::kShapeMismatch, "backbone expects " + to_string(d) + " input, got " +
                                                 std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }
  }
};

struct ToyBackboneOptions {
  Dims dims{128, 128};
  std::size_t k_src = 527;
  std::uint64_t seed = 3;
  /// Hidden unit j sees input_mean * mean(p) plus input_gain times a zero-sum
  /// random contrast of the tile means p (row contrast entries ~ N(0, 1/patches)).
  double input_mean = 1.0;
  double input_gain = 1.0;
  double bias_scale = 0.5;
};

/// Desk-scale stand-in for a pretrained classifier:
///   p = mean over each 16x16 tile,  h = tanh(A p + a),  scores = M h + m.
template <typename T>
class ToyBackbone final : public FrozenBackbone<T> {
 public:
  static constexpr std::size_t kPatch = 16;

  explicit ToyBackbone(const ToyBackboneOptions& opts) : opts_(opts) {
    if (opts.dims.frames == 0 || opts.dims.bands == 0 || opts.dims.frames % kPatch != 0 ||
        opts.dims.bands % kPatch != 0) {
      throw Error(ErrorCode::kBadDims, "toy backbone needs dims divisible by 16, got " + to_string(opts.dims));
    }
    if (opts.k_src == 0) throw Error(ErrorCode::kBadDims, "k_src must be positive");
    rows_ = opts.dims.frames / kPatch;
    cols_ = opts.dims.bands / kPatch;
    const std::size_t P = rows_ * cols_, K = opts.k_src;
    Rng rng(opts.seed);
    const double a_scale = opts.input_gain / std::sqrt(static_cast<double>(P));
    const double m_scale = 1.0 / std::sqrt(static_cast<double>(K));
    A_.resize(K * P);
    a_.resize(K);
    M_.resize(K * K);
    m_.resize(K);
    std::vector<double> row(P);
    for (std::size_t j = 0; j < K; ++j) {
      double mean = 0;
      for (auto& v : row) {
        v = a_scale * rng.normal();
        mean += v;
      }
      mean /= static_cast<double>(P);
      for (std::size_t i = 0; i < P; ++i) {
        A_[j * P + i] = static_cast<T>(row[i] - mean + opts.input_mean / static_cast<double>(P));
      }
    }
    for (auto& v : a_) v = static_cast<T>(opts.bias_scale * rng.normal());
    for (auto& v : M_) v = static_cast<T>(m_scale * rng.normal());
    for (auto& v : m_) v = static_cast<T>(0.1 * rng.normal());
  }

  Dims input_dims() const override { return opts_.dims; }
  std::size_t k_src() const override { return opts_.k_src; }
  const ToyBackboneOptions& options() const noexcept { return opts_; }

  std::vector<T> score(const Matrix<T>& x) const override {
    this->check_shape(x);
    const auto h = hidden(pool(x));
    return mix(h);
  }

  Matrix<T> backprop_input(const Matrix<T>& x, std::span<const T> upstream) const override {
    this->check_shape(x);
    const std::size_t K = opts_.k_src, P = rows_ * cols_;
    if (upstream.size() != K) throw Error(ErrorCode::kShapeMismatch, "upstream length must equal k_src");
    const auto h = hidden(pool(x));
    // g_h = M^T u ; g_z = g_h * (1 - h^2) ; g_p = A^T g_z
    std::vector<T> gz(K, T(0));
    for (std::size_t k = 0; k < K; ++k) {
      const T u = upstream[k];
      if (u == T(0)) continue;
      const T* row = M_.data() + k * K;
      for (std::size_t j = 0; j < K; ++j) gz[j] += row[j] * u;
    }
    for (std::size_t j = 0; j < K; ++j) gz[j] *= (T(1) - h[j] * h[j]);
    std::vector<T> gp(P, T(0));
    for (std::size_t j = 0; j < K; ++j) {
      const T g = gz[j];
      const T* row = A_.data() + j * P;
      for (std::size_t i = 0; i < P; ++i) gp[i] += row[i] * g;
    }
    Matrix<T> gx(x.rows(), x.cols());
    const T inv = T(1) / static_cast<T>(kPatch * kPatch);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T* g = gp.data() + (r / kPatch) * cols_;
      T* out = gx.data() + r * x.cols();
      for (std::size_t c = 0; c < x.cols(); ++c) out[c] = g[c / kPatch] * inv;
    }
    return gx;
  }

  /// Hashed from the live weights on every call, so any write to them shows up.
  std::uint64_t fingerprint() const override {
    ByteWriter w;
    w.put(static_cast<std::uint64_t>(opts_.dims.frames));
    w.put(static_cast<std::uint64_t>(opts_.dims.bands));
    w.put(static_cast<std::uint64_t>(opts_.k_src));
    for (const auto* block : {&A_, &a_, &M_, &m_}) {
      for (T v : *block) w.put(v);
    }
    Crc64 crc;
    crc.process_bytes(w.bytes().data(), w.bytes().size());
    return crc.checksum();
  }

 private:
  std::vector<T> pool(const Matrix<T>& x) const {
    std::vector<T> p(rows_ * cols_, T(0));
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T* row = x.data() + r * x.cols();
      T* dst = p.data() + (r / kPatch) * cols_;
      for (std::size_t c = 0; c < x.cols(); ++c) dst[c / kPatch] += row[c];
    }
    const T inv = T(1) / static_cast<T>(kPatch * kPatch);
    for (auto& v : p) v *= inv;
    return p;
  }

  std::vector<T> hidden(const std::vector<T>& p) const {
    const std::size_t K = opts_.k_src, P = p.size();
    std::vector<T> h(K);
    for (std::size_t j = 0; j < K; ++j) {
      const T* row = A_.data() + j * P;
      T z = a_[j];
      for (std::size_t i = 0; i < P; ++i) z += row[i] * p[i];
      h[j] = std::tanh(z);
    }
    return h;
  }

  std::vector<T> mix(const std::vector<T>& h) const {
    const std::size_t K = opts_.k_src;
    std::vector<T> s(K);
    for (std::size_t k = 0; k < K; ++k) {
      const T* row = M_.data() + k * K;
      T acc = m_[k];
      for (std::size_t j = 0; j < K; ++j) acc += row[j] * h[j];
      s[k] = acc;
    }
    return s;
  }

  ToyBackboneOptions opts_;
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> A_, a_, M_, m_;
};

/// Boundary to an externally supplied pretrained Audio Spectrogram Transformer.
/// The numerical model is provided by a runtime hook (for example an exported
/// graph executed by an inference engine); this class only enforces the contract.
template <typename T>
class AstAdapter final : public FrozenBackbone<T> {
 public:
  static constexpr Dims kInputDims{1024, 128};
  static constexpr std::size_t kSourceClasses = 527;

  struct Runtime {
    std::function<std::vector<T>(const Matrix<T>&)> score;
    std::function<Matrix<T>(const Matrix<T>&, std::span<const T>)> backprop_input;
  };

  explicit AstAdapter(std::filesystem::path weights) : weights_(std::move(weights)) {
    std::ifstream in(weights_, std::ios::binary);
    if (weights_.empty() || !in) {
      throw Error(ErrorCode::kWeightsUnavailable, "pretrained weights not found at '" + weights_.string() + "'");
    }
    Crc64 crc;
    char buf[1 << 16];
    while (in) {
      in.read(buf, sizeof(buf));
      crc.process_bytes(buf, static_cast<std::size_t>(in.gcount()));
    }
    fingerprint_ = crc.checksum();
    if (default_runtime()) runtime_ = *default_runtime();
  }

  void attach_runtime(Runtime rt) { runtime_ = std::move(rt); }

  /// Attached to every adapter constructed afterwards, including those built by
  /// make_backbone inside the training driver.
  static std::optional<Runtime>& default_runtime() {
    static std::optional<Runtime> rt;
    return rt;
  }

  Dims input_dims() const override { return kInputDims; }
  std::size_t k_src() const override { return kSourceClasses; }
  const std::filesystem::path& weights() const noexcept { return weights_; }

  std::vector<T> score(const Matrix<T>& x) const override {
    this->check_shape(x);
    require_runtime();
    return runtime_.score(x);
  }

  Matrix<T> backprop_input(const Matrix<T>& x, std::span<const T> upstream) const override {
    this->check_shape(x);
    require_runtime();
    return runtime_.backprop_input(x, upstream);
  }

  std::uint64_t fingerprint() const override { return fingerprint_; }

 private:
  void require_runtime() const {
    if (!runtime_.score || !runtime_.backprop_input) {
      throw Error(ErrorCode::kWeightsUnavailable,
                  "no inference runtime attached for '" + weights_.string() + "'");
    }
  }

  std::filesystem::path weights_;
  Runtime runtime_;
  std::uint64_t fingerprint_ = 0;
};

}  // namespace reprog
