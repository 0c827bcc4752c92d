// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "dkfac/linalg.hpp"
#include "oracles.hpp"

using namespace dkfac;

TEST_CASE("pack identity") {
  const auto p = pack_symmetric(DenseMatrix::identity(3));
  CHECK(p.dim == 3);
  CHECK(p.values == std::vector<double>{1, 0, 0, 1, 0, 1});
  CHECK(unpack_symmetric(p) == DenseMatrix::identity(3));
}

TEST_CASE("unpack hand expansion") {
  const auto m = unpack_symmetric({2, {2, 1, 3}});
  CHECK(m == DenseMatrix::from_rows({{2, 1}, {1, 3}}));
}

TEST_CASE("packed length of the largest factor") {
  CHECK(packed_length(2304) == 2655360u);
  CHECK(packed_dim(2655360) == 2304u);
  CHECK_THROWS_AS(packed_dim(4), LinalgError);
}

TEST_CASE("pack round trip is bitwise on random symmetric matrices") {
  std::mt19937_64 rng(11);
  for (std::size_t n = 1; n <= 9; ++n) {
    auto m = oracle::random_spd(n, rng, 0.0);
    CHECK(unpack_symmetric(pack_symmetric(m)) == m);
  }
}

TEST_CASE("pack rejects asymmetric input") {
  CHECK_THROWS_AS(pack_symmetric(DenseMatrix::from_rows({{1, 2}, {0, 1}})), LinalgError);
  CHECK_THROWS_AS(pack_symmetric(DenseMatrix(2, 3)), LinalgError);
}

TEST_CASE("invert scalar matrix") {
  const auto inv = invert_spd(DenseMatrix::identity(4, 1.1));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(inv(i, j) == doctest::Approx(i == j ? 1.0 / 1.1 : 0.0).epsilon(1e-15));
}

TEST_CASE("invert 2x2 closed form") {
  const auto inv = invert_spd(DenseMatrix::from_rows({{2, 1}, {1, 2}}));
  CHECK(inv(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(inv(0, 1) == doctest::Approx(-1.0 / 3.0).epsilon(1e-15));
  CHECK(inv(1, 0) == inv(0, 1));
  CHECK(inv(1, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("invert residual on random SPD, dims 1-64") {
  std::mt19937_64 rng(5);
  for (std::size_t n = 1; n <= 64; n += (n < 8 ? 1 : 7)) {
    const auto m = oracle::random_spd(n, rng);
    const auto inv = invert_spd(m);
    const Eigen::MatrixXd r =
        oracle::to_eigen(m) * oracle::to_eigen(inv) - Eigen::MatrixXd::Identity(n, n);
    CHECK(r.norm() <= 1e-8 * static_cast<double>(n));
    CHECK(inv == transpose(inv));
  }
}

TEST_CASE("invert reports the failing pivot") {
  try {
    invert_spd(DenseMatrix::from_rows({{1, 0}, {0, -2}}));
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(e.pivot() == 1);
    CHECK(e.value() == doctest::Approx(-2.0));
  }
}

TEST_CASE("frobenius norm") {
  CHECK(frobenius_norm(DenseMatrix(3, 3)) == 0.0);
  CHECK(frobenius_norm(DenseMatrix::identity(3)) == doctest::Approx(std::sqrt(3.0)));
  CHECK(frobenius_norm(DenseMatrix::from_rows({{3, 4}})) == doctest::Approx(5.0));
  std::mt19937_64 rng(2);
  const auto m = oracle::random_matrix(4, 5, rng);
  CHECK(frobenius_norm(-2.5 * m) == doctest::Approx(2.5 * frobenius_norm(m)).epsilon(1e-15));
}

TEST_CASE("kron_matvec identity and scalar factors") {
  std::mt19937_64 rng(3);
  const auto grad = oracle::random_matrix(2, 3, rng);
  CHECK(kron_matvec(DenseMatrix::identity(2), DenseMatrix::identity(3), grad) == grad);
  const auto scaled = kron_matvec(DenseMatrix::identity(2, 2.0), DenseMatrix::identity(3, 3.0), grad);
  for (std::size_t k = 0; k < grad.size(); ++k)
    CHECK(scaled.storage()[k] == doctest::Approx(6.0 * grad.storage()[k]).epsilon(1e-15));
}

TEST_CASE("kron_matvec matches the explicit Kronecker operator") {
  std::mt19937_64 rng(4);
  for (std::size_t dg = 1; dg <= 8; ++dg) {
    for (std::size_t da = 1; da <= 8; ++da) {
      const auto g = oracle::random_spd(dg, rng);
      const auto a = oracle::random_spd(da, rng);
      const auto grad = oracle::random_matrix(dg, da, rng);
      const auto got = kron_matvec(g, a, grad);
      const Eigen::VectorXd want =
          oracle::kron(oracle::to_eigen(g), oracle::to_eigen(a)) * oracle::vec_rows(grad);
      CHECK(oracle::rel_err(oracle::vec_rows(got), want) <= 1e-12);
    }
  }
}

TEST_CASE("kron_matvec shape check") {
  CHECK_THROWS_AS(kron_matvec(DenseMatrix::identity(2), DenseMatrix::identity(3), DenseMatrix(3, 2)),
                  LinalgError);
}

TEST_CASE("mean outer product") {
  const auto m = mean_outer_product(DenseMatrix::from_rows({{1, 0}, {0, 1}}));
  CHECK(m == DenseMatrix::identity(2, 0.5));
  const auto r = mean_outer_product(DenseMatrix::from_rows({{1, 2}}));
  CHECK(r == DenseMatrix::from_rows({{1, 2}, {2, 4}}));
}
