#pragma once

// Batched layer primitives for the convolutional reprogrammers. Every layer caches
// what its backward pass needs during the most recent forward call.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "reprog/error.hpp"
#include "reprog/rng.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

enum class Mode { kTrain, kEval };

/// A named trainable (or buffered) array with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> s, T fill = T(0)) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    value.assign(count, fill);
    grad.assign(count, T(0));
  }

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

namespace nn {

/// 3x3 convolution, stride 1, zero padding 1.
template <typename T>
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(const std::string& prefix, std::size_t in_channels, std::size_t out_channels)
      : in_(in_channels),
        out_(out_channels),
        weight_(prefix + ".weight", {out_channels, in_channels, 3, 3}),
        bias_(prefix + ".bias", {out_channels}) {}

  /// Uniform fan-in initialization in +-1/sqrt(in*9) for weights and bias.
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * 9));
    for (auto& w : weight_.value) w = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& b : bias_.value) b = static_cast<T>(rng.uniform(-bound, bound));
  }

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  Parameter<T>& weight() noexcept { return weight_; }
  Parameter<T>& bias() noexcept { return bias_; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c() != in_) throw Error(ErrorCode::kShapeMismatch, "conv input channel mismatch");
    input_ = x;
    const std::size_t H = x.h(), W = x.w();
    Tensor<T> y(x.n(), out_, H, W);
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t o = 0; o < out_; ++o) {
        T* op = y.plane(n, o);
        std::fill(op, op + H * W, bias_.value[o]);
        for (std::size_t i = 0; i < in_; ++i) {
          const T* ip = x.plane(n, i);
          const T* w = weight_.value.data() + (o * in_ + i) * 9;
          for (std::size_t yy = 0; yy < H; ++yy) {
            T* __restrict orow = op + yy * W;
            for (int ky = 0; ky < 3; ++ky) {
              const long iy = static_cast<long>(yy) + ky - 1;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const T* irow = ip + static_cast<std::size_t>(iy) * W;
              accumulate_row(orow, irow, w[ky * 3 + 0], w[ky * 3 + 1], w[ky * 3 + 2], W);
            }
          }
        }
      }
    }
    return y;
  }

  /// Accumulates weight/bias gradients; returns the input gradient.
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad = true) {
    const Tensor<T>& x = input_;
    if (gy.n() != x.n() || gy.c() != out_ || gy.h() != x.h() || gy.w() != x.w()) {
      throw Error(ErrorCode::kShapeMismatch, "conv upstream gradient shape mismatch");
    }
    const std::size_t H = x.h(), W = x.w();
    Tensor<T> gx;
    if (need_input_grad) gx = Tensor<T>(x.n(), in_, H, W);
    std::vector<T> acc(9 * W);
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t o = 0; o < out_; ++o) {
        const T* gp = gy.plane(n, o);
        T bsum = 0;
        for (std::size_t k = 0; k < H * W; ++k) bsum += gp[k];
        bias_.grad[o] += bsum;
        for (std::size_t i = 0; i < in_; ++i) {
          const T* ip = x.plane(n, i);
          const T* w = weight_.value.data() + (o * in_ + i) * 9;
          T* gw = weight_.grad.data() + (o * in_ + i) * 9;
          std::fill(acc.begin(), acc.end(), T(0));
          for (std::size_t yy = 0; yy < H; ++yy) {
            const T* grow = gp + yy * W;
            for (int ky = 0; ky < 3; ++ky) {
              const long iy = static_cast<long>(yy) + ky - 1;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const T* irow = ip + static_cast<std::size_t>(iy) * W;
              correlate_row(acc.data() + ky * 3 * W, grow, irow, W);
              // gx[iy][ix] += sum_kx w[ky][kx] * gy[yy][ix - kx + 1]
              if (need_input_grad) {
                accumulate_row(gx.plane(n, i) + static_cast<std::size_t>(iy) * W, grow, w[ky * 3 + 2], w[ky * 3 + 1],
                               w[ky * 3 + 0], W);
              }
            }
          }
          for (std::size_t t = 0; t < 9; ++t) {
            T s = 0;
            for (std::size_t k = 0; k < W; ++k) s += acc[t * W + k];
            gw[t] += s;
          }
        }
      }
    }
    return gx;
  }

 private:
  static void accumulate_row(T* __restrict orow, const T* __restrict irow, T w0, T w1, T w2, std::size_t W) {
    // out[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1]
    if (W == 1) {
      orow[0] += w1 * irow[0];
      return;
    }
    orow[0] += w1 * irow[0] + w2 * irow[1];
    for (std::size_t x = 1; x + 1 < W; ++x) orow[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
    orow[W - 1] += w0 * irow[W - 2] + w1 * irow[W - 1];
  }

  // a[kx*W + x] += g[x] * in[x + kx - 1], zero outside the row
  static void correlate_row(T* __restrict a, const T* __restrict g, const T* __restrict irow, std::size_t W) {
    T* __restrict a0 = a;
    T* __restrict a1 = a + W;
    T* __restrict a2 = a + 2 * W;
    for (std::size_t x = 0; x < W; ++x) a1[x] += g[x] * irow[x];
    for (std::size_t x = 1; x < W; ++x) a0[x] += g[x] * irow[x - 1];
    for (std::size_t x = 0; x + 1 < W; ++x) a2[x] += g[x] * irow[x + 1];
  }

  std::size_t in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  Tensor<T> input_;
};

/// Per-channel batch normalization over (N, H, W).
template <typename T>
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm() = default;
  BatchNorm(const std::string& prefix, std::size_t channels)
      : gamma_(prefix + ".gamma", {channels}, T(1)),
        beta_(prefix + ".beta", {channels}, T(0)),
        running_mean_(prefix + ".running_mean", {channels}, T(0)),
        running_var_(prefix + ".running_var", {channels}, T(1)) {}

  Parameter<T>& gamma() noexcept { return gamma_; }
  Parameter<T>& beta() noexcept { return beta_; }
  Parameter<T>& running_mean() noexcept { return running_mean_; }
  Parameter<T>& running_var() noexcept { return running_var_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    const std::size_t C = gamma_.size();
    if (x.c() != C) throw Error(ErrorCode::kShapeMismatch, "batch-norm channel mismatch");
    mode_ = mode;
    xhat_ = Tensor<T>(x.n(), C, x.h(), x.w());
    inv_std_.assign(C, T(0));
    Tensor<T> y(x.n(), C, x.h(), x.w());
    const std::size_t P = x.plane();
    const double m = static_cast<double>(x.n() * P);
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0, var = 0;
      if (mode == Mode::kTrain) {
        for (std::size_t n = 0; n < x.n(); ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t k = 0; k < P; ++k) mean += p[k];
        }
        mean /= m;
        for (std::size_t n = 0; n < x.n(); ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t k = 0; k < P; ++k) {
            const double d = p[k] - mean;
            var += d * d;
          }
        }
        var /= m;
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        running_mean_.value[c] =
            static_cast<T>((1 - kMomentum) * running_mean_.value[c] + kMomentum * mean);
        running_var_.value[c] =
            static_cast<T>((1 - kMomentum) * running_var_.value[c] + kMomentum * unbiased);
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
      const T mu = static_cast<T>(mean);
      inv_std_[c] = inv;
      const T g = gamma_.value[c], b = beta_.value[c];
      for (std::size_t n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, c);
        T* xh = xhat_.plane(n, c);
        T* yp = y.plane(n, c);
        for (std::size_t k = 0; k < P; ++k) {
          xh[k] = (p[k] - mu) * inv;
          yp[k] = g * xh[k] + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const std::size_t C = gamma_.size();
    if (!gy.same_shape(xhat_)) throw Error(ErrorCode::kShapeMismatch, "batch-norm gradient shape mismatch");
    Tensor<T> gx(gy.n(), C, gy.h(), gy.w());
    const std::size_t P = gy.plane();
    const double m = static_cast<double>(gy.n() * P);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t n = 0; n < gy.n(); ++n) {
        const T* g = gy.plane(n, c);
        const T* xh = xhat_.plane(n, c);
        for (std::size_t k = 0; k < P; ++k) {
          sum_dy += g[k];
          sum_dy_xhat += g[k] * xh[k];
        }
      }
      gamma_.grad[c] += static_cast<T>(sum_dy_xhat);
      beta_.grad[c] += static_cast<T>(sum_dy);
      const T scale = gamma_.value[c] * inv_std_[c];
      const T mean_dy = static_cast<T>(sum_dy / m);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
      for (std::size_t n = 0; n < gy.n(); ++n) {
        const T* g = gy.plane(n, c);
        const T* xh = xhat_.plane(n, c);
        T* out = gx.plane(n, c);
        if (mode_ == Mode::kTrain) {
          for (std::size_t k = 0; k < P; ++k) out[k] = scale * (g[k] - mean_dy - xh[k] * mean_dy_xhat);
        } else {
          for (std::size_t k = 0; k < P; ++k) out[k] = scale * g[k];
        }
      }
    }
    return gx;
  }

 private:
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Mode mode_ = Mode::kTrain;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(Tensor<T> x) {
    mask_.resize(x.size());
    auto s = x.span();
    for (std::size_t k = 0; k < s.size(); ++k) {
      mask_[k] = s[k] > T(0);
      if (!mask_[k]) s[k] = T(0);
    }
    return x;
  }

  Tensor<T> backward(Tensor<T> g) const {
    auto s = g.span();
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (!mask_[k]) s[k] = T(0);
    }
    return g;
  }

 private:
  std::vector<std::uint8_t> mask_;
};

/// 2x2 max-pooling, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) throw Error(ErrorCode::kBadDims, "max-pool needs even dims");
    in_h_ = x.h();
    in_w_ = x.w();
    const std::size_t H = x.h() / 2, W = x.w() / 2;
    Tensor<T> y(x.n(), x.c(), H, W);
    argmax_.resize(y.size());
    std::size_t idx = 0;
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t c = 0; c < x.c(); ++c) {
        const T* p = x.plane(n, c);
        T* out = y.plane(n, c);
        for (std::size_t yy = 0; yy < H; ++yy) {
          for (std::size_t xx = 0; xx < W; ++xx, ++idx) {
            const std::size_t base = 2 * yy * in_w_ + 2 * xx;
            const std::size_t cand[4] = {base, base + 1, base + in_w_, base + in_w_ + 1};
            std::size_t best = cand[0];
            for (int k = 1; k < 4; ++k) {
              if (p[cand[k]] > p[best]) best = cand[k];
            }
            out[yy * W + xx] = p[best];
            argmax_[idx] = static_cast<std::uint32_t>(best);
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) const {
    Tensor<T> gx(g.n(), g.c(), in_h_, in_w_);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < g.n(); ++n) {
      for (std::size_t c = 0; c < g.c(); ++c) {
        const T* gp = g.plane(n, c);
        T* out = gx.plane(n, c);
        for (std::size_t k = 0; k < g.plane(); ++k, ++idx) out[argmax_[idx]] += gp[k];
      }
    }
    return gx;
  }

 private:
  std::size_t in_h_ = 0, in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

/// Linear interpolation taps for doubling a length-`n` axis with half-pixel
/// centers (source coordinate (o + 0.5) / 2 - 0.5, clamped at the edges).
struct UpsampleTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;

  explicit UpsampleTaps(std::size_t n) {
    for (std::size_t o = 0; o < 2 * n; ++o) {
      double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      if (src < 0) src = 0;
      auto i0 = static_cast<std::size_t>(std::floor(src));
      if (i0 > n - 1) i0 = n - 1;
      const std::size_t i1 = std::min(i0 + 1, n - 1);
      const double frac = src - static_cast<double>(i0);
      lo.push_back(i0);
      hi.push_back(i1);
      w_lo.push_back(1.0 - frac);
      w_hi.push_back(frac);
    }
  }
};

/// Bilinear x2 upsampling (separable), stateless.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const std::size_t H = x.h(), W = x.w();
  const UpsampleTaps th(H), tw(W);
  Tensor<T> y(x.n(), x.c(), 2 * H, 2 * W);
  std::vector<T> rows(H * 2 * W);
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t o = 0; o < 2 * W; ++o) {
          rows[r * 2 * W + o] = static_cast<T>(tw.w_lo[o]) * p[r * W + tw.lo[o]] +
                                static_cast<T>(tw.w_hi[o]) * p[r * W + tw.hi[o]];
        }
      }
      T* out = y.plane(n, c);
      for (std::size_t o = 0; o < 2 * H; ++o) {
        const T a = static_cast<T>(th.w_lo[o]), b = static_cast<T>(th.w_hi[o]);
        const T* r0 = rows.data() + th.lo[o] * 2 * W;
        const T* r1 = rows.data() + th.hi[o] * 2 * W;
        for (std::size_t k = 0; k < 2 * W; ++k) out[o * 2 * W + k] = a * r0[k] + b * r1[k];
      }
    }
  }
  return y;
}

/// Adjoint of upsample2.
template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& g) {
  const std::size_t H = g.h() / 2, W = g.w() / 2;
  const UpsampleTaps th(H), tw(W);
  Tensor<T> gx(g.n(), g.c(), H, W);
  std::vector<T> rows(H * 2 * W);
  for (std::size_t n = 0; n < g.n(); ++n) {
    for (std::size_t c = 0; c < g.c(); ++c) {
      const T* gp = g.plane(n, c);
      std::fill(rows.begin(), rows.end(), T(0));
      for (std::size_t o = 0; o < 2 * H; ++o) {
        const T a = static_cast<T>(th.w_lo[o]), b = static_cast<T>(th.w_hi[o]);
        T* r0 = rows.data() + th.lo[o] * 2 * W;
        T* r1 = rows.data() + th.hi[o] * 2 * W;
        for (std::size_t k = 0; k < 2 * W; ++k) {
          r0[k] += a * gp[o * 2 * W + k];
          r1[k] += b * gp[o * 2 * W + k];
        }
      }
      T* out = gx.plane(n, c);
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t o = 0; o < 2 * W; ++o) {
          const T v = rows[r * 2 * W + o];
          out[r * W + tw.lo[o]] += static_cast<T>(tw.w_lo[o]) * v;
          out[r * W + tw.hi[o]] += static_cast<T>(tw.w_hi[o]) * v;
        }
      }
    }
  }
  return gx;
}

/// Channel concatenation [a, b].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw Error(ErrorCode::kShapeMismatch, "concat operands differ in spatial shape");
  }
  Tensor<T> y(a.n(), a.c() + b.c(), a.h(), a.w());
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t c = 0; c < a.c(); ++c) std::copy(a.plane(n, c), a.plane(n, c) + a.plane(), y.plane(n, c));
    for (std::size_t c = 0; c < b.c(); ++c)
      std::copy(b.plane(n, c), b.plane(n, c) + b.plane(), y.plane(n, a.c() + c));
  }
  return y;
}

/// Splits a gradient over concatenated channels back into its two parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::size_t first) {
  Tensor<T> a(g.n(), first, g.h(), g.w()), b(g.n(), g.c() - first, g.h(), g.w());
  for (std::size_t n = 0; n < g.n(); ++n) {
    for (std::size_t c = 0; c < g.c(); ++c) {
      T* dst = c < first ? a.plane(n, c) : b.plane(n, c - first);
      std::copy(g.plane(n, c), g.plane(n, c) + g.plane(), dst);
    }
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.span();
  auto s = src.span();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
}

}  // namespace nn
}  // namespace reprog
