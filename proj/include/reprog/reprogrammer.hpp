#pragma once

// Trainable input transforms applied to a spectrogram before the frozen backbone.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "reprog/error.hpp"
#include "reprog/nn.hpp"
#include "reprog/rng.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

enum class ReprogrammerKind { kIdentity, kNoise, kCnn, kUnet };

inline std::string_view kind_name(ReprogrammerKind k) {
  switch (k) {
    case ReprogrammerKind::kIdentity: return "none";
    case ReprogrammerKind::kNoise: return "noise";
    case ReprogrammerKind::kCnn: return "cnn";
    case ReprogrammerKind::kUnet: return "unet";
  }
  return "?";
}

inline ReprogrammerKind parse_reprogrammer_kind(std::string_view s) {
  if (s == "none" || s == "identity") return ReprogrammerKind::kIdentity;
  if (s == "noise") return ReprogrammerKind::kNoise;
  if (s == "cnn") return ReprogrammerKind::kCnn;
  if (s == "unet") return ReprogrammerKind::kUnet;
  throw Error(ErrorCode::kConfigInvalid, "reprogrammer.kind: unknown kind '" + std::string(s) + "'");
}

struct ReprogrammerOptions {
  std::size_t cnn_hidden = 16;
  bool cnn_relu = true;
  std::array<std::size_t, 3> unet_widths = {4, 8, 16};
};

template <typename T>
class Reprogrammer {
 public:
  explicit Reprogrammer(Dims dims) : dims_(dims) {}
  virtual ~Reprogrammer() = default;

  virtual ReprogrammerKind kind() const = 0;

  /// Transforms an N x 1 x T x F batch. In kTrain mode the call caches what
  /// backward() needs and batch-norm layers use batch statistics.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;

  /// Accumulates parameter gradients of <upstream, forward(x)> for the batch of
  /// the most recent forward call. Returns the input gradient when requested.
  virtual Tensor<T> backward(const Tensor<T>& upstream, bool need_input_grad = false) = 0;

  virtual std::vector<Parameter<T>*> parameters() = 0;

  /// Non-trainable state (batch-norm running statistics).
  virtual std::vector<Parameter<T>*> buffers() { return {}; }

  Dims dims() const noexcept { return dims_; }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Single-spectrogram evaluation-mode transform.
  Matrix<T> apply(const Matrix<T>& x) {
    const Matrix<T>* items[] = {&x};
    return unstack(forward(stack<T>(items), Mode::kEval), 0);
  }

 protected:
  void check_input(const Tensor<T>& x) const {
    if (x.c() != 1 || x.h() != dims_.frames || x.w() != dims_.bands) {
      throw Error(ErrorCode::kShapeMismatch, "reprogrammer expects " + to_string(dims_) + " input, got " +
                                                 std::to_string(x.h()) + "x" + std::to_string(x.w()));
    }
  }

 private:
  Dims dims_;
};

template <typename T>
class IdentityReprogrammer final : public Reprogrammer<T> {
 public:
  explicit IdentityReprogrammer(Dims dims) : Reprogrammer<T>(dims) {}
  ReprogrammerKind kind() const override { return ReprogrammerKind::kIdentity; }
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->check_input(x);
    return x;
  }
  Tensor<T> backward(const Tensor<T>& upstream, bool need_input_grad) override {
    return need_input_grad ? upstream : Tensor<T>{};
  }
  std::vector<Parameter<T>*> parameters() override { return {}; }
};

/// X_hat = X + N with one N shared by every input.
template <typename T>
class NoiseReprogrammer final : public Reprogrammer<T> {
 public:
  explicit NoiseReprogrammer(Dims dims) : Reprogrammer<T>(dims), noise_("noise.N", {dims.frames, dims.bands}) {}

  ReprogrammerKind kind() const override { return ReprogrammerKind::kNoise; }
  Parameter<T>& noise() noexcept { return noise_; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->check_input(x);
    batch_ = x.n();
    Tensor<T> y = x;
    for (std::size_t n = 0; n < y.n(); ++n) {
      T* p = y.plane(n, 0);
      for (std::size_t k = 0; k < y.plane(); ++k) p[k] += noise_.value[k];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& upstream, bool need_input_grad) override {
    for (std::size_t n = 0; n < upstream.n(); ++n) {
      const T* g = upstream.plane(n, 0);
      for (std::size_t k = 0; k < upstream.plane(); ++k) noise_.grad[k] += g[k];
    }
    return need_input_grad ? upstream : Tensor<T>{};
  }

  std::vector<Parameter<T>*> parameters() override { return {&noise_}; }

 private:
  Parameter<T> noise_;
  std::size_t batch_ = 0;
};

/// Two 3x3 convolutions (1 -> hidden -> 1), optional ReLU in between, no pooling.
template <typename T>
class CnnReprogrammer final : public Reprogrammer<T> {
 public:
  CnnReprogrammer(Dims dims, std::size_t hidden, bool relu, Rng& rng)
      : Reprogrammer<T>(dims), conv1_("cnn.conv1", 1, hidden), conv2_("cnn.conv2", hidden, 1), use_relu_(relu) {
    conv1_.init(rng);
    conv2_.init(rng);
  }

  ReprogrammerKind kind() const override { return ReprogrammerKind::kCnn; }
  nn::Conv3x3<T>& conv1() noexcept { return conv1_; }
  nn::Conv3x3<T>& conv2() noexcept { return conv2_; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    this->check_input(x);
    auto h = conv1_.forward(x);
    if (use_relu_) h = relu_.forward(std::move(h));
    return conv2_.forward(h);
  }

  Tensor<T> backward(const Tensor<T>& upstream, bool need_input_grad) override {
    auto g = conv2_.backward(upstream);
    if (use_relu_) g = relu_.backward(std::move(g));
    return conv1_.backward(g, need_input_grad);
  }

  std::vector<Parameter<T>*> parameters() override {
    return {&conv1_.weight(), &conv1_.bias(), &conv2_.weight(), &conv2_.bias()};
  }

 private:
  nn::Conv3x3<T> conv1_, conv2_;
  nn::Relu<T> relu_;
  bool use_relu_;
};

/// Three-level U-Net. Contraction: conv -> BN -> ReLU, then 2x2 max-pool.
/// Expansion: bilinear x2 upsample, concatenate [skip, upsampled], conv -> BN -> ReLU.
/// The final expansion block has no ReLU and emits one channel.
template <typename T>
class UNetReprogrammer final : public Reprogrammer<T> {
 public:
  UNetReprogrammer(Dims dims, std::array<std::size_t, 3> widths, Rng& rng) : Reprogrammer<T>(dims) {
    if (dims.frames == 0 || dims.bands == 0 || dims.frames % 8 != 0 || dims.bands % 8 != 0) {
      throw Error(ErrorCode::kBadDims, "U-Net needs both dims divisible by 8, got " + to_string(dims));
    }
    const auto [w1, w2, w3] = widths;
    enc_[0] = Block("unet.enc1", 1, w1, true);
    enc_[1] = Block("unet.enc2", w1, w2, true);
    enc_[2] = Block("unet.enc3", w2, w3, true);
    dec_[0] = Block("unet.dec3", 2 * w3, w2, true);
    dec_[1] = Block("unet.dec2", 2 * w2, w1, true);
    dec_[2] = Block("unet.dec1", 2 * w1, 1, false);
    for (auto& b : enc_) b.conv.init(rng);
    for (auto& b : dec_) b.conv.init(rng);
  }

  ReprogrammerKind kind() const override { return ReprogrammerKind::kUnet; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    this->check_input(x);
    Tensor<T> h = x;
    for (std::size_t l = 0; l < 3; ++l) {
      skip_[l] = enc_[l].forward(h, mode);
      h = pool_[l].forward(skip_[l]);
    }
    // dec_[0] pairs with skip level 3, dec_[2] with level 1
    for (std::size_t l = 0; l < 3; ++l) {
      const std::size_t level = 2 - l;
      auto up = nn::upsample2(h);
      skip_channels_[l] = skip_[level].c();
      h = dec_[l].forward(nn::concat_channels(skip_[level], up), mode);
    }
    for (auto& s : skip_) s = Tensor<T>{};
    return h;
  }

  Tensor<T> backward(const Tensor<T>& upstream, bool need_input_grad) override {
    std::array<Tensor<T>, 3> skip_grad;
    Tensor<T> g = upstream;
    for (std::size_t l = 3; l-- > 0;) {
      const std::size_t level = 2 - l;
      auto gc = dec_[l].backward(g, true);
      auto [gs, gu] = nn::split_channels(gc, skip_channels_[l]);
      skip_grad[level] = std::move(gs);
      g = nn::upsample2_backward(gu);
    }
    for (std::size_t l = 3; l-- > 0;) {
      auto gs = pool_[l].backward(g);
      nn::add_into(gs, skip_grad[l]);
      g = enc_[l].backward(gs, l > 0 || need_input_grad);
    }
    return need_input_grad ? g : Tensor<T>{};
  }

  std::vector<Parameter<T>*> parameters() override {
    std::vector<Parameter<T>*> out;
    for (auto* b : blocks()) {
      out.push_back(&b->conv.weight());
      out.push_back(&b->conv.bias());
      out.push_back(&b->bn.gamma());
      out.push_back(&b->bn.beta());
    }
    return out;
  }

  std::vector<Parameter<T>*> buffers() override {
    std::vector<Parameter<T>*> out;
    for (auto* b : blocks()) {
      out.push_back(&b->bn.running_mean());
      out.push_back(&b->bn.running_var());
    }
    return out;
  }

 private:
  struct Block {
    nn::Conv3x3<T> conv;
    nn::BatchNorm<T> bn;
    nn::Relu<T> relu;
    bool use_relu = true;

    Block() = default;
    Block(const std::string& prefix, std::size_t in, std::size_t out, bool relu_after)
        : conv(prefix + ".conv", in, out), bn(prefix + ".bn", out), use_relu(relu_after) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
      auto h = bn.forward(conv.forward(x), mode);
      return use_relu ? relu.forward(std::move(h)) : h;
    }
    Tensor<T> backward(Tensor<T> g, bool need_input_grad) {
      if (use_relu) g = relu.backward(std::move(g));
      return conv.backward(bn.backward(g), need_input_grad);
    }
  };

  std::array<Block*, 6> blocks() { return {&enc_[0], &enc_[1], &enc_[2], &dec_[0], &dec_[1], &dec_[2]}; }

  std::array<Block, 3> enc_, dec_;
  std::array<nn::MaxPool2<T>, 3> pool_;
  std::array<Tensor<T>, 3> skip_;
  std::array<std::size_t, 3> skip_channels_{};
};

/// Deterministic construction: identical (kind, dims, options, seed) give bitwise
/// identical parameters. Noise starts at zero so the initial model equals the baseline.
template <typename T>
std::unique_ptr<Reprogrammer<T>> make_reprogrammer(ReprogrammerKind kind, Dims dims,
                                                   const ReprogrammerOptions& opts, std::uint64_t seed) {
  if (dims.frames == 0 || dims.bands == 0) throw Error(ErrorCode::kBadDims, "reprogrammer dims must be positive");
  Rng rng(seed);
  switch (kind) {
    case ReprogrammerKind::kIdentity: return std::make_unique<IdentityReprogrammer<T>>(dims);
    case ReprogrammerKind::kNoise: return std::make_unique<NoiseReprogrammer<T>>(dims);
    case ReprogrammerKind::kCnn:
      if (opts.cnn_hidden == 0) throw Error(ErrorCode::kConfigInvalid, "cnn hidden width must be positive");
      return std::make_unique<CnnReprogrammer<T>>(dims, opts.cnn_hidden, opts.cnn_relu, rng);
    case ReprogrammerKind::kUnet:
      for (auto w : opts.unet_widths) {
        if (w == 0) throw Error(ErrorCode::kConfigInvalid, "unet widths must be positive");
      }
      return std::make_unique<UNetReprogrammer<T>>(dims, opts.unet_widths, rng);
  }
  throw Error(ErrorCode::kConfigInvalid, "unknown reprogrammer kind");
}

/// Trainable-scalar count without building the model.
inline std::size_t reprogrammer_param_count(ReprogrammerKind kind, Dims dims, const ReprogrammerOptions& opts) {
  auto conv = [](std::size_t in, std::size_t out) { return in * out * 9 + out; };
  switch (kind) {
    case ReprogrammerKind::kIdentity: return 0;
    case ReprogrammerKind::kNoise: return dims.frames * dims.bands;
    case ReprogrammerKind::kCnn: return conv(1, opts.cnn_hidden) + conv(opts.cnn_hidden, 1);
    case ReprogrammerKind::kUnet: {
      const auto [w1, w2, w3] = opts.unet_widths;
      auto block = [&](std::size_t in, std::size_t out) { return conv(in, out) + 2 * out; };
      return block(1, w1) + block(w1, w2) + block(w2, w3) + block(2 * w3, w2) + block(2 * w2, w1) +
             block(2 * w1, 1);
    }
  }
  return 0;
}

}  // namespace reprog
