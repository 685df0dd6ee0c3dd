// Copyright 2026 The MoeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major float matrices and the handful of kernels the engine needs.
//
// Every reduction runs in ascending index order. Nothing here blocks, tiles or
// vectorizes a reduction, so two code paths that issue the same sequence of
// kernel calls on the same inputs produce bitwise-identical results. The
// expert-by-expert executor relies on this to match the token-order reference.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace moeflow {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vector = std::vector<float>;

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row in Matrix::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  static Matrix row_vector(std::span<const float> v) {
    return Matrix(1, v.size(), std::vector<float>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  // Value equality; +0 and -0 compare equal. See bitwise_equal for the strict form.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(x[i]) != std::bit_cast<std::uint32_t>(y[i])) return false;
  }
  return true;
}

inline float max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: shape mismatch");
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](float v) { return std::isfinite(v); });
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Standard product. Each output element is accumulated as
// 0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ... in that order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const float lhs = a(i, k);
      const auto rhs = b.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += lhs * rhs[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

// m + broadcast(bias) over rows.
inline Matrix add_row_bias(Matrix m, std::span<const float> bias) {
  if (bias.size() != m.cols()) {
    throw ShapeError("add_row_bias: bias length " + std::to_string(bias.size()) +
                     " vs " + std::to_string(m.cols()) + " columns");
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return m;
}

// x * w + b, the row-vector affine map used by every linear layer.
inline Matrix affine(const Matrix& x, const Matrix& w, std::span<const float> b) {
  return add_row_bias(matmul(x, w), b);
}

inline Matrix add(Matrix a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: " + shape_str(a) + " + " + shape_str(b));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
  return a;
}

inline Matrix scale(Matrix m, float s) {
  for (float& v : m.data()) v *= s;
  return m;
}

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto src = m.row(i);
    auto dst = out.row(i);
    if (src.empty()) continue;
    const float peak = *std::max_element(src.begin(), src.end());
    float total = 0.0f;
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::exp(src[j] - peak);
      total += dst[j];
    }
    for (float& v : dst) v /= total;
  }
  return out;
}

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}

inline Matrix gelu(Matrix m) {
  for (float& v : m.data()) v = gelu(v);
  return m;
}

inline Matrix relu(Matrix m) {
  for (float& v : m.data()) v = std::max(v, 0.0f);
  return m;
}

inline Vector relu(Vector v) {
  for (float& x : v) x = std::max(x, 0.0f);
  return v;
}

// Per-row normalization with biased variance, then gamma * x_hat + beta.
inline Matrix layer_norm(const Matrix& m, std::span<const float> gamma,
                         std::span<const float> beta, float eps) {
  if (gamma.size() != m.cols() || beta.size() != m.cols()) {
    throw ShapeError("layer_norm: gamma/beta length must equal " + std::to_string(m.cols()));
  }
  Matrix out(m.rows(), m.cols());
  const float n = static_cast<float>(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto src = m.row(i);
    auto dst = out.row(i);
    float mean = 0.0f;
    for (float v : src) mean += v;
    mean /= n;
    float var = 0.0f;
    for (float v : src) var += (v - mean) * (v - mean);
    var /= n;
    const float inv_std = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = (src[j] - mean) * inv_std * gamma[j] + beta[j];
    }
  }
  return out;
}

// Indices of the k largest values, ordered by descending value; equal values
// are ordered (and selected) by ascending index.
inline std::vector<std::size_t> top_k_indices(std::span<const float> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw std::out_of_range("top_k_indices: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (v[a] != v[b]) return v[a] > v[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

// Rows of m picked in the given order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Columns [begin, begin + count).
inline Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw ShapeError("slice_cols out of range");
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, begin + j);
  return out;
}

inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), dst.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

// dst += weight * src, elementwise. Shared by every MoE combine path so the
// float operation sequence is identical between them.
inline void accumulate_scaled(std::span<float> dst, float weight, std::span<const float> src) {
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += weight * src[j];
}

}  // namespace moeflow
