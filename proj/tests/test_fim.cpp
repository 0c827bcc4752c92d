// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "dkfac/fim.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace dkfac;

namespace {

Tensor rows_tensor(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

// (g + s_g I) (x) (a + s_a I), inverted densely and applied to row-major vec(grad).
Eigen::VectorXd dense_preconditioned(const DenseMatrix& a, const DenseMatrix& g, double gamma,
                                     const DenseMatrix& grad) {
  const double ta = a.rows() ? oracle::to_eigen(a).trace() / a.rows() : 0.0;
  const double tg = g.rows() ? oracle::to_eigen(g).trace() / g.rows() : 0.0;
  const double pi = (ta > 0 && tg > 0) ? std::sqrt(ta / tg) : 1.0;
  const Eigen::MatrixXd ad = oracle::to_eigen(a) + pi * std::sqrt(gamma) * Eigen::MatrixXd::Identity(a.rows(), a.rows());
  const Eigen::MatrixXd gd = oracle::to_eigen(g) + std::sqrt(gamma) / pi * Eigen::MatrixXd::Identity(g.rows(), g.rows());
  const Eigen::MatrixXd f = oracle::kron(gd, ad);
  return f.inverse() * oracle::vec_rows(grad);
}

} // namespace

TEST_CASE("A factor hand cases") {
  CHECK(compute_a_factor(rows_tensor(1, 2, {1, 2})) == DenseMatrix::from_rows({{1, 2}, {2, 4}}));
  CHECK(compute_a_factor(rows_tensor(2, 2, {1, 0, 0, 1})) == DenseMatrix::identity(2, 0.5));
}

TEST_CASE("bias coordinate survives zero activations") {
  std::vector<LayerSpec> specs{fully_connected_spec({1, 1, 1}, 2)};
  auto net = build_network(specs, 1);
  Batch b;
  b.inputs = Tensor({3, 1, 1, 1});
  b.labels = Tensor({3, 2}, {1, 0, 0, 1, 1, 0});
  forward(net, b);
  CHECK(compute_a_factor(net[0].record.captured_input) == DenseMatrix::from_rows({{0, 0}, {0, 1}}));
}

TEST_CASE("G factor hand cases") {
  CHECK(compute_g_factor(rows_tensor(1, 1, {3})) == DenseMatrix::from_rows({{9}}));
  const double s = 1.0 / std::sqrt(2.0);
  const auto g = compute_g_factor(rows_tensor(2, 2, {s, s, s, -s}));
  CHECK(g(0, 0) == doctest::Approx(0.5));
  CHECK(g(0, 1) == doctest::Approx(0.0));
  CHECK(g(1, 1) == doctest::Approx(0.5));
  CHECK(compute_g_factor(Tensor({4, 3})) == DenseMatrix(3, 3));
}

TEST_CASE("factors from real captures are symmetric PSD") {
  const auto conv = conv2d_spec({2, 4, 4}, 3, 3, 1, 1);
  std::vector<LayerSpec> specs{conv, fully_connected_spec(conv.out_dims, 2)};
  auto net = build_network(specs, 3);
  const auto b = oracle::random_batch({2, 4, 4}, 5, 2, 9);
  const auto fr = forward(net, b);
  backward(net, fr.logits, b.labels);
  for (const auto& layer : net) {
    for (const auto& f : {compute_a_factor(layer.record.captured_input),
                          compute_g_factor(layer.record.captured_output_grad)}) {
      CHECK(f == transpose(f));
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(oracle::to_eigen(f));
      CHECK(es.eigenvalues().minCoeff() >= -1e-10 * frobenius_norm(f));
    }
  }
}

TEST_CASE("damping with identity factors") {
  const auto d = damp_factors(DenseMatrix::identity(3), DenseMatrix::identity(2), 0.01);
  CHECK(d.pi == doctest::Approx(1.0));
  CHECK(d.a(0, 0) == doctest::Approx(1.1));
  CHECK(d.g(1, 1) == doctest::Approx(1.1));
  CHECK(d.a(0, 1) == 0.0);
}

TEST_CASE("damping trace ratio") {
  const auto d = damp_factors(DenseMatrix::identity(2, 4.0), DenseMatrix::identity(3), 0.04);
  CHECK(d.pi == doctest::Approx(2.0));
  CHECK(d.a(0, 0) == doctest::Approx(4.4));
  CHECK(d.g(0, 0) == doctest::Approx(1.1));
}

TEST_CASE("damping with a zero factor uses pi = 1") {
  const auto d = damp_factors(DenseMatrix(2, 2), DenseMatrix::identity(2), 0.25);
  CHECK(d.pi == 1.0);
  CHECK(d.a(0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(damp_factors(DenseMatrix::identity(2), DenseMatrix::identity(2), 0.0), FimError);
}

TEST_CASE("damped Kronecker product dominates F + gamma I") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = oracle::random_spd(2, rng, 0.0);
    const auto g = oracle::random_spd(2, rng, 0.0);
    const double gamma = 0.01 * (1 + trial);
    const auto d = damp_factors(a, g, gamma);
    const Eigen::MatrixXd lhs = oracle::kron(oracle::to_eigen(d.g), oracle::to_eigen(d.a));
    const Eigen::MatrixXd rhs =
        oracle::kron(oracle::to_eigen(g), oracle::to_eigen(a)) + gamma * Eigen::MatrixXd::Identity(4, 4);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lhs - rhs);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12 * lhs.norm());
  }
}

TEST_CASE("precondition with identity factors") {
  KroneckerPair p{DenseMatrix::identity(3), DenseMatrix::identity(2), {}, {}, {}};
  const auto grad = DenseMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const auto out = precondition(p, grad, 0.01, true, 0);
  for (std::size_t k = 0; k < 6; ++k)
    CHECK(out.storage()[k] == doctest::Approx(grad.storage()[k] / (1.1 * 1.1)).epsilon(1e-14));
  CHECK(p.last_refresh == 0);
}

TEST_CASE("precondition matches the dense Kronecker inverse") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = oracle::random_spd(3, rng, 0.0);
    const auto g = oracle::random_spd(2, rng, 0.0);
    const auto grad = oracle::random_matrix(2, 3, rng);
    KroneckerPair p{a, g, {}, {}, {}};
    const auto got = precondition(p, grad, 0.05, true, 4);
    CHECK(oracle::rel_err(oracle::vec_rows(got), dense_preconditioned(a, g, 0.05, grad)) <= 1e-10);
  }
}

TEST_CASE("stale precondition is pure") {
  std::mt19937_64 rng(9);
  KroneckerPair p{oracle::random_spd(3, rng), oracle::random_spd(2, rng), {}, {}, {}};
  const auto grad = oracle::random_matrix(2, 3, rng);
  precondition(p, grad, 0.1, true, 3);
  const auto first = precondition(p, grad, 0.2, false, 4);
  const auto second = precondition(p, grad, 0.3, false, 5);
  CHECK(first == second);
  CHECK(p.last_refresh == 3);
}

TEST_CASE("stale request without inverses is an error") {
  KroneckerPair p{DenseMatrix::identity(2), DenseMatrix::identity(2), {}, {}, {}};
  CHECK_THROWS_AS(precondition(p, DenseMatrix(2, 2), 0.1, false, 0), FimError);
}

TEST_CASE("huge damping approaches scaled SGD") {
  std::mt19937_64 rng(10);
  const auto a = oracle::random_spd(4, rng);
  const auto g = oracle::random_spd(3, rng);
  // normalize to unit average eigenvalue
  const auto an = (1.0 / (trace(a) / 4)) * a;
  const auto gn = (1.0 / (trace(g) / 3)) * g;
  KroneckerPair p{an, gn, {}, {}, {}};
  const auto grad = oracle::random_matrix(3, 4, rng);
  const double gamma = 1e6;
  const auto out = precondition(p, grad, gamma, true, 0);
  CHECK(frobenius_norm(gamma * out - grad) / frobenius_norm(grad) <= 0.01);
}

TEST_CASE("BN block hand case, C = 1") {
  const auto sg = DenseMatrix::from_rows({{1, 2}, {3, 4}});
  const auto full = bn_block_from_sample_grads(sg, BnFimMode::full);
  const auto diag = bn_block_from_sample_grads(sg, BnFimMode::diagonal);
  CHECK(full.full == DenseMatrix::from_rows({{5, 7}, {7, 10}}));
  CHECK(diag.diag == std::vector<double>{5, 10});
  const auto zero = bn_block_from_sample_grads(DenseMatrix(3, 4), BnFimMode::full);
  CHECK(zero.full == DenseMatrix(4, 4));
}

TEST_CASE("BN diagonal equals the diagonal of the full block") {
  const auto bn = batch_norm_spec({3, 2, 2}, true);
  std::vector<LayerSpec> specs{bn, fully_connected_spec(bn.out_dims, 2)};
  auto net = build_network(specs, 4);
  const auto b = oracle::random_batch({3, 2, 2}, 6, 2, 4);
  const auto fr = forward(net, b);
  backward(net, fr.logits, b.labels);
  const auto full = compute_bn_block(net[0], BnFimMode::full);
  const auto diag = compute_bn_block(net[0], BnFimMode::diagonal);
  REQUIRE(full.full.rows() == 6);
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(diag.diag[i] == full.full(i, i));
}

TEST_CASE("BN per-sample gradients sum to the batch gradient") {
  const auto bn = batch_norm_spec({2, 3, 1}, true);
  std::vector<LayerSpec> specs{bn, fully_connected_spec(bn.out_dims, 3)};
  auto net = build_network(specs, 7);
  const auto b = oracle::random_batch({2, 3, 1}, 5, 3, 5);
  const auto fr = forward(net, b);
  backward(net, fr.logits, b.labels);
  const auto sg = bn_sample_grads(net[0]);
  REQUIRE(sg.rows() == 5);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t n = 0; n < 5; ++n)
      mean += sg(n, j);
    CHECK(mean / 5.0 == doctest::Approx(net[0].record.weight_grad[j]).epsilon(1e-12));
  }
}

TEST_CASE("precondition_bn cases") {
  BnFisherBlock zero = bn_block_from_sample_grads(DenseMatrix(1, 2), BnFimMode::full);
  const auto z = precondition_bn(zero, std::vector<double>{2.0, 4.0}, 0.5);
  CHECK(z[0] == doctest::Approx(4.0));
  CHECK(z[1] == doctest::Approx(8.0));

  BnFisherBlock d;
  d.mode = BnFimMode::diagonal;
  d.diag = {5, 10};
  const auto out = precondition_bn(d, std::vector<double>{6.0, 22.0}, 1.0);
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(out[1] == doctest::Approx(2.0));

  BnFisherBlock f;
  f.mode = BnFimMode::full;
  f.full = DenseMatrix::from_rows({{5, 0}, {0, 10}});
  const auto fo = precondition_bn(f, std::vector<double>{6.0, 22.0}, 1.0);
  CHECK(fo[0] == doctest::Approx(out[0]).epsilon(1e-14));
  CHECK(fo[1] == doctest::Approx(out[1]).epsilon(1e-14));
}

TEST_CASE("FIM memory arithmetic") {
  const auto r = fim_memory_report({batch_norm_spec({64, 1, 1})}, 8);
  REQUIRE(r.full.size() == 1);
  CHECK(r.full[0].f_bn_bytes == 131072u);
  CHECK(r.diagonal[0].f_bn_bytes == 1024u);
  CHECK(r.full[0].f_bn_bytes / r.diagonal[0].f_bn_bytes == 128u);

  const auto fc = fim_memory_report({fully_connected_spec({10, 1, 1}, 10)}, 8);
  CHECK(fc.full[0].a_bytes == 11u * 11u * 8u);
  CHECK(fc.full[0].g_bytes == 10u * 10u * 8u);
  CHECK(fc.total_full == fc.total_diagonal);

  const auto empty = fim_memory_report({}, 8);
  CHECK(empty.full.empty());
  CHECK(empty.total_full == 0u);
}
