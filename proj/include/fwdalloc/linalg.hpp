#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwdalloc/rng.hpp"

namespace fwdalloc {

using Vector = std::vector<double>;

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionMismatch(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                            " vs " + std::to_string(b) + ")");
  }
}

/// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  [[nodiscard]] std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  [[nodiscard]] const Vector& data() const noexcept { return data_; }
  Vector& data() noexcept { return data_; }

  [[nodiscard]] double max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  [[nodiscard]] Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  friend Matrix operator*(const Matrix& a, const Matrix& b) {
    require_same_size(a.cols_, b.rows_, "matrix product");
    Matrix c(a.rows_, b.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i)
      for (std::size_t k = 0; k < a.cols_; ++k) {
        const double aik = a(i, k);
        if (aik == 0.0) continue;
        for (std::size_t j = 0; j < b.cols_; ++j) c(i, j) += aik * b(k, j);
      }
    return c;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

/// Square matrix whose writes keep (i, j) and (j, i) identical.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(std::size_t dim) : m_(dim, dim) {}

  /// Symmetrizes by averaging; exact when the input already is symmetric.
  static SymMatrix from(const Matrix& m) {
    require_same_size(m.rows(), m.cols(), "SymMatrix");
    SymMatrix s(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j <= i; ++j) s.set(i, j, i == j ? m(i, i) : 0.5 * (m(i, j) + m(j, i)));
    return s;
  }

  [[nodiscard]] std::size_t dim() const noexcept { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const noexcept { return m_(i, j); }
  void set(std::size_t i, std::size_t j, double v) noexcept {
    m_(i, j) = v;
    m_(j, i) = v;
  }
  void add_diagonal(double v) noexcept {
    for (std::size_t i = 0; i < dim(); ++i) m_(i, i) += v;
  }
  [[nodiscard]] const Matrix& matrix() const noexcept { return m_; }

 private:
  Matrix m_;
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  explicit NotPositiveDefinite(std::size_t index)
      : std::runtime_error("not positive definite: non-positive pivot at index " + std::to_string(index)),
        index_(index) {}
  [[nodiscard]] std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Lower-triangular factor L with L * L^T = M.
struct Cholesky {
  Matrix lower;
  double log_det = 0.0;

  [[nodiscard]] std::size_t dim() const noexcept { return lower.rows(); }

  /// Solves L y = b.
  [[nodiscard]] Vector solve_lower(std::span<const double> b) const {
    require_same_size(b.size(), dim(), "solve_lower");
    const std::size_t n = dim();
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i];
      for (std::size_t k = 0; k < i; ++k) s -= lower(i, k) * y[k];
      y[i] = s / lower(i, i);
    }
    return y;
  }

  /// Solves L^T x = y.
  [[nodiscard]] Vector solve_upper(std::span<const double> y) const {
    require_same_size(y.size(), dim(), "solve_upper");
    const std::size_t n = dim();
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= lower(k, ii) * x[k];
      x[ii] = s / lower(ii, ii);
    }
    return x;
  }

  /// Solves M x = b.
  [[nodiscard]] Vector solve(std::span<const double> b) const { return solve_upper(solve_lower(b)); }

  [[nodiscard]] Matrix inverse() const {
    const std::size_t n = dim();
    Matrix inv(n, n);
    Vector e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      e.assign(n, 0.0);
      e[j] = 1.0;
      const Vector col = solve(e);
      for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
  }

  [[nodiscard]] Matrix reconstruct() const { return lower * lower.transposed(); }
};

inline Cholesky cholesky(const SymMatrix& m) {
  const std::size_t n = m.dim();
  Cholesky out{Matrix(n, n), 0.0};
  auto& L = out.lower;
  for (std::size_t j = 0; j < n; ++j) {
    double diag = m(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= L(j, k) * L(j, k);
    if (!(diag > 0.0)) throw NotPositiveDefinite(j);
    const double ljj = std::sqrt(diag);
    L(j, j) = ljj;
    out.log_det += 2.0 * std::log(ljj);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
      L(i, j) = s / ljj;
    }
  }
  return out;
}

/// Draws mu + L u with u standard normal.
inline Vector sample_mvn(std::span<const double> mu, const Matrix& chol_lower, RngStream& rng) {
  require_same_size(mu.size(), chol_lower.rows(), "sample_mvn");
  require_same_size(chol_lower.rows(), chol_lower.cols(), "sample_mvn");
  const std::size_t n = mu.size();
  const Vector u = rng.normal_vector(n);
  Vector out(mu.begin(), mu.end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k <= i; ++k) out[i] += chol_lower(i, k) * u[k];
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

struct Cosine {
  double value = 0.0;
  bool degenerate = false;  // one of the inputs was the zero vector
};

inline Cosine cosine_similarity(std::span<const double> u, std::span<const double> v) {
  require_same_size(u.size(), v.size(), "cosine_similarity");
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) return {0.0, true};
  return {std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0), false};
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace fwdalloc
