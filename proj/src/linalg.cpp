// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dkfac {

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream oss;
    oss << what << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows()
        << "x" << b.cols();
    throw LinalgError(oss.str());
  }
}

} // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols)
    throw LinalgError("DenseMatrix: value count does not match rows*cols");
}

DenseMatrix DenseMatrix::identity(std::size_t n, double scale) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    m(i, i) = scale;
  return m;
}

DenseMatrix DenseMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.front().size();
  DenseMatrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c)
      throw LinalgError("DenseMatrix::from_rows: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
  }
  return m;
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] += other.values_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] -= other.values_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double scale) {
  for (auto& v : values_)
    v *= scale;
  return *this;
}

DenseMatrix operator+(DenseMatrix lhs, const DenseMatrix& rhs) { return lhs += rhs; }
DenseMatrix operator-(DenseMatrix lhs, const DenseMatrix& rhs) { return lhs -= rhs; }
DenseMatrix operator*(double scale, DenseMatrix m) { return m *= scale; }

std::size_t packed_dim(std::size_t length) {
  // d = (sqrt(8n+1) - 1) / 2, corrected for rounding.
  auto d = static_cast<std::size_t>((std::sqrt(8.0 * static_cast<double>(length) + 1.0) - 1.0) / 2.0);
  while (packed_length(d) < length)
    ++d;
  while (d > 0 && packed_length(d) > length)
    --d;
  if (packed_length(d) != length) {
    std::ostringstream oss;
    oss << "packed length " << length << " is not of the form d(d+1)/2";
    throw LinalgError(oss.str());
  }
  return d;
}

NotPositiveDefinite::NotPositiveDefinite(std::size_t pivot, double value)
    : LinalgError([&] {
        std::ostringstream oss;
        oss << "matrix is not positive definite: Cholesky pivot " << pivot << " = " << value;
        return oss.str();
      }()),
      pivot_(pivot), value_(value) {}

SymmetricPacked pack_symmetric(const DenseMatrix& m) {
  if (!m.square()) {
    std::ostringstream oss;
    oss << "pack_symmetric: matrix is " << m.rows() << "x" << m.cols() << ", not square";
    throw LinalgError(oss.str());
  }
  const std::size_t d = m.rows();
  const double tol = 1e-12 * max_abs(m);
  SymmetricPacked p{d, {}};
  p.values.reserve(packed_length(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > tol) {
        std::ostringstream oss;
        oss << "pack_symmetric: asymmetry at (" << i << "," << j << ") exceeds tolerance";
        throw LinalgError(oss.str());
      }
      p.values.push_back(m(i, j));
    }
  }
  return p;
}

DenseMatrix unpack_symmetric(const SymmetricPacked& p) {
  if (p.values.size() != packed_length(p.dim))
    packed_dim(p.values.size()); // throws with the length diagnostic
  const std::size_t d = p.dim;
  DenseMatrix m(d, d);
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j, ++k) {
      m(i, j) = p.values[k];
      m(j, i) = p.values[k];
    }
  }
  return m;
}

DenseMatrix invert_spd(const DenseMatrix& m) {
  if (!m.square())
    throw LinalgError("invert_spd: matrix is not square");
  const std::size_t n = m.rows();

  // Lower Cholesky factor, in place.
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = m(j, j);
    for (std::size_t k = 0; k < j; ++k)
      diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0))
      throw NotPositiveDefinite(j, diag);
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k)
        s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }

  // Forward substitution for L^-1, column by column.
  DenseMatrix linv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k)
        s -= l(i, k) * linv(k, j);
      linv(i, j) = s / l(i, i);
    }
  }

  // M^-1 = L^-T L^-1; only the upper triangle is computed, then mirrored.
  DenseMatrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < n; ++k)
        s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return inv;
}

double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double v : m.values())
    s += v * v;
  return std::sqrt(s);
}

double trace(const DenseMatrix& m) {
  double s = 0.0;
  const std::size_t n = std::min(m.rows(), m.cols());
  for (std::size_t i = 0; i < n; ++i)
    s += m(i, i);
  return s;
}

double max_abs(const DenseMatrix& m) {
  double s = 0.0;
  for (double v : m.values())
    s = std::max(s, std::abs(v));
  return s;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    std::ostringstream oss;
    oss << "matmul: inner dimensions differ (" << a.rows() << "x" << a.cols() << " * "
        << b.rows() << "x" << b.cols() << ")";
    throw LinalgError(oss.str());
  }
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0)
        continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j)
        ci[j] += aik * bk[j];
    }
  }
  return c;
}

DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      t(j, i) = m(i, j);
  return t;
}

DenseMatrix add_diagonal(DenseMatrix a, double shift) {
  const std::size_t n = std::min(a.rows(), a.cols());
  for (std::size_t i = 0; i < n; ++i)
    a(i, i) += shift;
  return a;
}

DenseMatrix kron_matvec(const DenseMatrix& g_inv, const DenseMatrix& a_inv,
                        const DenseMatrix& grad) {
  if (!g_inv.square() || !a_inv.square() || grad.rows() != g_inv.rows() ||
      grad.cols() != a_inv.rows()) {
    std::ostringstream oss;
    oss << "kron_matvec: grad is " << grad.rows() << "x" << grad.cols() << " but factors are "
        << g_inv.rows() << "x" << g_inv.cols() << " and " << a_inv.rows() << "x" << a_inv.cols();
    throw LinalgError(oss.str());
  }
  return matmul(matmul(g_inv, grad), a_inv);
}

DenseMatrix mean_outer_product(const DenseMatrix& rows) {
  const std::size_t n = rows.rows();
  const std::size_t d = rows.cols();
  if (n == 0)
    throw LinalgError("mean_outer_product: no rows");
  DenseMatrix out(d, d);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = rows.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = x[i];
      if (xi == 0.0)
        continue;
      auto oi = out.row(i);
      for (std::size_t j = i; j < d; ++j)
        oi[j] += xi * x[j];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      out(i, j) *= inv_n;
      out(j, i) = out(i, j);
    }
  }
  return out;
}

} // namespace dkfac
