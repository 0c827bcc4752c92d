// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dkfac {

/// Dense row-major matrix of doubles.
class DenseMatrix {
public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static DenseMatrix identity(std::size_t n, double scale = 1.0);
  /// Builds a matrix from nested rows; all rows must have the same length.
  static DenseMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool square() const { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> row(std::size_t i) { return {values_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * cols_, cols_}; }
  const std::vector<double>& storage() const { return values_; }

  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double scale);

  bool operator==(const DenseMatrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

DenseMatrix operator+(DenseMatrix lhs, const DenseMatrix& rhs);
DenseMatrix operator-(DenseMatrix lhs, const DenseMatrix& rhs);
DenseMatrix operator*(double scale, DenseMatrix m);

/// Upper triangle of a symmetric matrix, stored row by row:
/// (0,0) (0,1) ... (0,d-1) (1,1) ... (d-1,d-1).
struct SymmetricPacked {
  std::size_t dim = 0;
  std::vector<double> values;

  bool operator==(const SymmetricPacked&) const = default;
};

constexpr std::size_t packed_length(std::size_t dim) { return dim * (dim + 1) / 2; }

/// Recovers d from a packed length d(d+1)/2; throws if the length has no such form.
std::size_t packed_dim(std::size_t length);

class LinalgError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised by invert_spd when a Cholesky pivot is not strictly positive.
class NotPositiveDefinite : public LinalgError {
public:
  NotPositiveDefinite(std::size_t pivot, double value);
  std::size_t pivot() const { return pivot_; }
  double value() const { return value_; }

private:
  std::size_t pivot_;
  double value_;
};

SymmetricPacked pack_symmetric(const DenseMatrix& m);
DenseMatrix unpack_symmetric(const SymmetricPacked& p);

/// Inverse of a symmetric positive definite matrix via Cholesky. The result is
/// exactly symmetric. No regularization is applied.
DenseMatrix invert_spd(const DenseMatrix& m);

double frobenius_norm(const DenseMatrix& m);
double trace(const DenseMatrix& m);
double max_abs(const DenseMatrix& m);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& m);

/// a + shift * I
DenseMatrix add_diagonal(DenseMatrix a, double shift);

/// Computes (G^-1 (x) A^-1) vec(grad) as g_inv * grad * a_inv, where vec is
/// the row-major flattening of grad (rows indexed by G, columns by A).
DenseMatrix kron_matvec(const DenseMatrix& g_inv, const DenseMatrix& a_inv,
                        const DenseMatrix& grad);

/// Mean of r r^T over the rows r of `rows`. Exactly symmetric.
DenseMatrix mean_outer_product(const DenseMatrix& rows);

} // namespace dkfac
