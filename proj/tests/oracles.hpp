// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

// Independent reference computations for tests. Nothing here calls into the
// library's numerical kernels.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dkfac/linalg.hpp"

namespace oracle {

inline Eigen::MatrixXd to_eigen(const dkfac::DenseMatrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      out(i, j) = m(i, j);
  return out;
}

inline dkfac::DenseMatrix from_eigen(const Eigen::MatrixXd& m) {
  dkfac::DenseMatrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      out(i, j) = m(i, j);
  return out;
}

/// Explicit Kronecker product kron(x, y).
inline Eigen::MatrixXd kron(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  Eigen::MatrixXd out(x.rows() * y.rows(), x.cols() * y.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.block(i * y.rows(), j * y.cols(), y.rows(), y.cols()) = x(i, j) * y;
  return out;
}

/// Row-major vec of a matrix.
inline Eigen::VectorXd vec_rows(const dkfac::DenseMatrix& m) {
  Eigen::VectorXd v(m.size());
  for (std::size_t k = 0; k < m.size(); ++k)
    v(k) = m.storage()[k];
  return v;
}

/// B^T B + shift I with B standard normal.
inline dkfac::DenseMatrix random_spd(std::size_t n, std::mt19937_64& rng, double shift = 1.0) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd b(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      b(i, j) = nd(rng);
  Eigen::MatrixXd m = b.transpose() * b + shift * Eigen::MatrixXd::Identity(n, n);
  m = 0.5 * (m + m.transpose());
  return from_eigen(m);
}

inline dkfac::DenseMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  dkfac::DenseMatrix m(r, c);
  for (auto& v : m.values())
    v = nd(rng);
  return m;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline double rel_err(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  const double d = want.norm();
  return (got - want).norm() / (d > 0 ? d : 1.0);
}

} // namespace oracle
