// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense vectors and row-major matrices. Storage is the template scalar
// (float for activations and parameters, double for oracles and gradient
// checks); every reduction accumulates in double.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "proxsae/errors.hpp"

namespace proxsae {

template <class T>
class Vector {
 public:
  using value_type = T;

  Vector() = default;
  explicit Vector(std::size_t n, T fill = T{0}) : data_(n, fill) {
    require(n > 0, "Vector: length must be positive");
  }
  Vector(std::initializer_list<T> init) : data_(init) {
    require(!data_.empty(), "Vector: length must be positive");
  }
  explicit Vector(std::vector<T> data) : data_(std::move(data)) {
    require(!data_.empty(), "Vector: length must be positive");
  }
  template <class U>
  static Vector from(std::span<const U> src) {
    std::vector<T> out(src.size());
    std::transform(src.begin(), src.end(), out.begin(), [](U v) { return static_cast<T>(v); });
    return Vector(std::move(out));
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  operator std::span<const T>() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<T> data_;
};

template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    require(rows > 0 && cols > 0, "Matrix: dimensions must be positive");
  }
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(rows > 0 && cols > 0, "Matrix: dimensions must be positive");
    require(data_.size() == rows * cols, "Matrix: data length != rows*cols");
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    require(rows_ > 0 && cols_ > 0, "Matrix: dimensions must be positive");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      require(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  template <class U>
  static Matrix from(const Matrix<U>& src) {
    std::vector<T> out(src.size());
    std::transform(src.flat().begin(), src.flat().end(), out.begin(), [](U v) { return static_cast<T>(v); });
    return Matrix(src.rows(), src.cols(), std::move(out));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vector<T> col(std::size_t c) const {
    Vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }
  void set_col(std::size_t c, std::span<const T> v) {
    require(v.size() == rows_, "Matrix::set_col: length mismatch");
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Vectorf = Vector<float>;
using Vectord = Vector<double>;
using Matrixf = Matrix<float>;
using Matrixd = Matrix<double>;

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <class T, class U>
double dot(std::span<const T> a, std::span<const U> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class T>
double squared_norm(std::span<const T> a) {
  return dot(a, a);
}

template <class T>
double norm(std::span<const T> a) {
  return std::sqrt(squared_norm(a));
}

template <class T>
double norm(const Vector<T>& a) {
  return norm(a.span());
}

template <class T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}

/// out = M v, accumulated in double per output entry.
template <class T>
void matvec_into(const Matrix<T>& m, std::span<const T> v, std::span<double> out) {
  require(m.cols() == v.size(), "matvec: M.cols != v.len");
  require(out.size() == m.rows(), "matvec: output length != M.rows");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += static_cast<double>(row[c]) * static_cast<double>(v[c]);
    out[r] = acc;
  }
}

/// out = M^T v. Accumulates row by row into a double buffer; the summation
/// order per output entry is the same as matvec on the transpose.
template <class T>
void matvec_t_into(const Matrix<T>& m, std::span<const T> v, std::span<double> out) {
  require(m.rows() == v.size(), "matvec_t: M.rows != v.len");
  require(out.size() == m.cols(), "matvec_t: output length != M.cols");
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t cols = m.cols();
  double* o = out.data();
  std::size_t r = 0;
  // four rows per pass; each output still sums rows in ascending order
  for (; r + 4 <= m.rows(); r += 4) {
    const double v0 = static_cast<double>(v[r]), v1 = static_cast<double>(v[r + 1]);
    const double v2 = static_cast<double>(v[r + 2]), v3 = static_cast<double>(v[r + 3]);
    const T* r0 = m.row(r).data();
    const T* r1 = m.row(r + 1).data();
    const T* r2 = m.row(r + 2).data();
    const T* r3 = m.row(r + 3).data();
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = o[c] + static_cast<double>(r0[c]) * v0;
      acc += static_cast<double>(r1[c]) * v1;
      acc += static_cast<double>(r2[c]) * v2;
      acc += static_cast<double>(r3[c]) * v3;
      o[c] = acc;
    }
  }
  for (; r < m.rows(); ++r) {
    const double vr = static_cast<double>(v[r]);
    const T* row = m.row(r).data();
    for (std::size_t c = 0; c < cols; ++c) o[c] += static_cast<double>(row[c]) * vr;
  }
}

/// out_s = M^T v_s for N inputs at once. Each row of M is converted once and
/// used for all N inputs; per output the rows are still summed in ascending
/// order, so every out_s is bitwise equal to matvec_t_into(M, v_s).
template <std::size_t N, class T>
void matvec_t_block_into(const Matrix<T>& m, const std::array<const T*, N>& v, const std::array<double*, N>& out) {
  const std::size_t cols = m.cols(), rows = m.rows();
  for (std::size_t s = 0; s < N; ++s) std::fill(out[s], out[s] + cols, 0.0);
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    double vv[4][N];
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t s = 0; s < N; ++s) vv[q][s] = static_cast<double>(v[s][r + q]);
    const T* r0 = m.row(r).data();
    const T* r1 = m.row(r + 1).data();
    const T* r2 = m.row(r + 2).data();
    const T* r3 = m.row(r + 3).data();
    for (std::size_t c = 0; c < cols; ++c) {
      const double w0 = static_cast<double>(r0[c]), w1 = static_cast<double>(r1[c]);
      const double w2 = static_cast<double>(r2[c]), w3 = static_cast<double>(r3[c]);
      for (std::size_t s = 0; s < N; ++s) {
        double acc = out[s][c] + w0 * vv[0][s];
        acc += w1 * vv[1][s];
        acc += w2 * vv[2][s];
        acc += w3 * vv[3][s];
        out[s][c] = acc;
      }
    }
  }
  for (; r < rows; ++r) {
    const T* row = m.row(r).data();
    for (std::size_t s = 0; s < N; ++s) {
      const double vr = static_cast<double>(v[s][r]);
      for (std::size_t c = 0; c < cols; ++c) out[s][c] += static_cast<double>(row[c]) * vr;
    }
  }
}

template <class T>
Vector<T> matvec(const Matrix<T>& m, const Vector<T>& v) {
  std::vector<double> acc(m.rows());
  matvec_into(m, v.span(), std::span<double>(acc));
  return Vector<T>::from(std::span<const double>(acc));
}

template <class T>
Vector<T> matvec_t(const Matrix<T>& m, const Vector<T>& v) {
  std::vector<double> acc(m.cols());
  matvec_t_into(m, v.span(), std::span<double>(acc));
  return Vector<T>::from(std::span<const double>(acc));
}

/// Rescales every column to unit l2 norm. A zero column is reported by index.
template <class T>
Matrix<T> column_normalize(const Matrix<T>& m) {
  std::vector<double> sq(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) sq[c] += static_cast<double>(m(r, c)) * static_cast<double>(m(r, c));
  Matrix<T> out = m;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    if (!(sq[c] > 0.0))
      throw DegenerateAtomError("column_normalize: column " + std::to_string(c) + " has zero norm", c);
    const double inv = 1.0 / std::sqrt(sq[c]);
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) = static_cast<T>(static_cast<double>(m(r, c)) * inv);
  }
  return out;
}

/// Largest squared singular value of M by power iteration on M^T M.
template <class T>
double spectral_norm_sq(const Matrix<T>& m, std::size_t iters = 50) {
  std::vector<double> v(m.cols(), 1.0 / std::sqrt(static_cast<double>(m.cols())));
  std::vector<double> mv(m.rows()), mtmv(m.cols());
  double estimate = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < m.cols(); ++c) acc += static_cast<double>(m(r, c)) * v[c];
      mv[r] = acc;
    }
    std::fill(mtmv.begin(), mtmv.end(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) mtmv[c] += static_cast<double>(m(r, c)) * mv[r];
    const double n = norm(std::span<const double>(mtmv));
    if (n == 0.0) return 0.0;
    estimate = n;
    for (std::size_t c = 0; c < m.cols(); ++c) v[c] = mtmv[c] / n;
  }
  return estimate;
}

}  // namespace proxsae
