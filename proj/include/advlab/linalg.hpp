#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "advlab/errors.hpp"
#include "advlab/rng.hpp"

namespace advlab {

using Vector = std::vector<double>;

/// Non-owning row-major view over a rows x cols block.
template <class T>
struct BasicMatrixView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<T> data;

  T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<T> row(std::size_t i) const { return data.subspan(i * cols, cols); }

  operator BasicMatrixView<const T>() const { return {rows, cols, data}; }
};

using MatrixView = BasicMatrixView<double>;
using ConstMatrixView = BasicMatrixView<const double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw ShapeError("matrix payload does not match rows x cols");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const Vector& values() const { return data_; }

  operator MatrixView() { return {rows_, cols_, data_}; }
  operator ConstMatrixView() const { return {rows_, cols_, data_}; }
  MatrixView view() { return *this; }
  ConstMatrixView view() const { return *this; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// ---------------------------------------------------------------------------
// Vector kernels

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm1(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

inline double norm_inf(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s = std::max(s, std::abs(v));
  return s;
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("add: length mismatch");
  Vector out(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

inline Vector subtract(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("subtract: length mismatch");
  Vector out(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
  return out;
}

inline Vector scaled(std::span<const double> a, double c) {
  Vector out(a.begin(), a.end());
  for (double& v : out) v *= c;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

/// Pairwise (cascade) summation in a fixed, data-independent order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t h = v.size() / 2;
  return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ValidationError("mean of empty range");
  return pairwise_sum(v) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Matrix kernels

inline Vector matvec(ConstMatrixView a, std::span<const double> x) {
  if (a.cols != x.size()) throw ShapeError("matvec: dimension mismatch");
  Vector y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) y[i] = dot(a.row(i), x);
  return y;
}

/// aᵀ x
inline Vector matvec_transposed(ConstMatrixView a, std::span<const double> x) {
  if (a.rows != x.size()) throw ShapeError("matvec_transposed: dimension mismatch");
  Vector y(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) axpy(x[i], a.row(i), y);
  return y;
}

inline Matrix transpose(ConstMatrixView a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(ConstMatrixView a, ConstMatrixView b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimension mismatch");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

/// a aᵀ
inline Matrix gram_rows(ConstMatrixView a) {
  Matrix g(a.rows, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = dot(a.row(i), a.row(j));
      g(i, j) = v;
      g(j, i) = v;
    }
  return g;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Symmetric positive definite solves

/// Cholesky factor L (lower triangular) with a = L Lᵀ.
class Cholesky {
 public:
  static constexpr double kPivotTolerance = 1e-12;
  static constexpr double kSymmetryTolerance = 1e-10;

  explicit Cholesky(ConstMatrixView a) : n_(a.rows), l_(a.rows, a.rows) {
    if (a.rows != a.cols) throw ShapeError("cholesky: matrix is not square");
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (std::abs(a(i, j) - a(j, i)) > kSymmetryTolerance)
          throw SingularityError("cholesky: matrix is not symmetric");
    for (std::size_t j = 0; j < n_; ++j) {
      double d = a(j, j);
      for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
      if (!(d > kPivotTolerance))
        throw SingularityError("cholesky: non-positive pivot at column " + std::to_string(j));
      const double ljj = std::sqrt(d);
      l_(j, j) = ljj;
      for (std::size_t i = j + 1; i < n_; ++i) {
        double s = a(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / ljj;
      }
    }
  }

  std::size_t size() const { return n_; }
  const Matrix& factor() const { return l_; }

  Vector solve(std::span<const double> b) const {
    if (b.size() != n_) throw ShapeError("cholesky solve: rhs length mismatch");
    Vector z(b.begin(), b.end());
    for (std::size_t i = 0; i < n_; ++i) {
      double s = z[i];
      for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * z[k];
      z[i] = s / l_(i, i);
    }
    for (std::size_t ii = n_; ii-- > 0;) {
      double s = z[ii];
      for (std::size_t k = ii + 1; k < n_; ++k) s -= l_(k, ii) * z[k];
      z[ii] = s / l_(ii, ii);
    }
    return z;
  }

 private:
  std::size_t n_;
  Matrix l_;
};

inline Vector solve_spd(ConstMatrixView a, std::span<const double> b) { return Cholesky(a).solve(b); }

// ---------------------------------------------------------------------------
// Spectral norm

struct PowerIterationOptions {
  std::size_t max_iterations = 200;
  double relative_tolerance = 1e-10;
};

/// Largest singular value of `a` by power iteration on aᵀa.
inline double spectral_norm(ConstMatrixView a, RngStream rng = RngStream(0, streams::kSpectral),
                            PowerIterationOptions opt = {}) {
  if (a.rows == 0 || a.cols == 0) throw ShapeError("spectral_norm: empty matrix");
  if (std::all_of(a.data.begin(), a.data.end(), [](double v) { return v == 0.0; })) return 0.0;

  Vector v(a.cols);
  for (double& x : v) x = rng.normal();
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  double lambda = 0.0;
  double previous = 0.0;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    const Vector u = matvec(a, v);
    lambda = dot(u, u);
    Vector w = matvec_transposed(a, u);
    const double nw = norm2(w);
    if (nw == 0.0) break;
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
    if (it > 0 && std::abs(lambda - previous) < opt.relative_tolerance * lambda) break;
    previous = lambda;
  }
  return std::sqrt(lambda);
}

}  // namespace advlab
