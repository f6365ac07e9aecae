#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "reprog/error.hpp"

namespace reprog {

/// Dense row-major matrix. Rows index time frames, columns index mel bands.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::kShapeMismatch, "matrix data size does not match shape");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  const std::vector<T>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Time/frequency extent of a spectrogram.
struct Dims {
  std::size_t frames = 0;
  std::size_t bands = 0;

  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(Dims d) {
  return std::to_string(d.frames) + "x" + std::to_string(d.bands);
}

/// Log-mel spectrogram: `frames` x `n_mels` log energies.
template <typename T>
struct Spectrogram {
  Matrix<T> values;
  double frame_hop_ms = 10.0;

  Spectrogram() = default;
  explicit Spectrogram(Matrix<T> v, double hop_ms = 10.0) : values(std::move(v)), frame_hop_ms(hop_ms) {
    validate();
  }

  std::size_t frames() const noexcept { return values.rows(); }
  std::size_t n_mels() const noexcept { return values.cols(); }
  Dims dims() const noexcept { return {values.rows(), values.cols()}; }

  void validate() const {
    if (values.rows() == 0 || values.cols() == 0) {
      throw Error(ErrorCode::kBadDims, "spectrogram must have at least one frame and one band");
    }
    if (!values.all_finite()) {
      throw Error(ErrorCode::kNonFiniteInput, "spectrogram contains non-finite entries");
    }
  }
};

/// Batch of multi-channel planes in N x C x H x W order.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w), data_(n * c * h * w, fill) {}

  std::size_t n() const noexcept { return n_; }
  std::size_t c() const noexcept { return c_; }
  std::size_t h() const noexcept { return h_; }
  std::size_t w() const noexcept { return w_; }
  std::size_t plane() const noexcept { return h_ * w_; }
  std::size_t size() const noexcept { return data_.size(); }

  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + (n * c_ + c) * h_ * w_; }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + (n * c_ + c) * h_ * w_;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }

  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Tensor& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Stacks single-channel spectrograms into an N x 1 x T x F batch.
template <typename T>
Tensor<T> stack(std::span<const Matrix<T>* const> items) {
  if (items.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "cannot stack an empty batch");
  }
  const auto rows = items.front()->rows();
  const auto cols = items.front()->cols();
  Tensor<T> out(items.size(), 1, rows, cols);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->rows() != rows || items[i]->cols() != cols) {
      throw Error(ErrorCode::kShapeMismatch, "batch items differ in shape");
    }
    std::copy(items[i]->data(), items[i]->data() + items[i]->size(), out.plane(i, 0));
  }
  return out;
}

template <typename T>
Matrix<T> unstack(const Tensor<T>& t, std::size_t index) {
  std::vector<T> v(t.plane(index, 0), t.plane(index, 0) + t.plane());
  return Matrix<T>(t.h(), t.w(), std::move(v));
}

}  // namespace reprog
