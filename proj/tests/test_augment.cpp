// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "dkfac/augment.hpp"

using namespace dkfac;

namespace {

Batch filled(std::size_t m, double x, std::size_t label) {
  Batch b;
  b.inputs = Tensor({m, 1, 2, 2}, x);
  b.labels = Tensor({m, 3});
  for (std::size_t n = 0; n < m; ++n)
    b.labels[n * 3 + label] = 1.0;
  return b;
}

} // namespace

TEST_CASE("Beta(1,1) is uniform") {
  std::mt19937_64 rng(1);
  double sum = 0.0;
  bool in_range = true;
  for (int i = 0; i < 100000; ++i) {
    const double v = sample_beta(1.0, 1.0, rng);
    in_range = in_range && v >= 0.0 && v <= 1.0;
    sum += v;
  }
  CHECK(in_range);
  CHECK(std::abs(sum / 1e5 - 0.5) <= 0.01);
}

TEST_CASE("Beta(0.4,0.4) moments") {
  std::mt19937_64 rng(2);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  bool in_range = true;
  for (int i = 0; i < n; ++i) {
    const double v = sample_beta(0.4, 0.4, rng);
    in_range = in_range && v >= 0.0 && v <= 1.0;
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  const double want = 1.0 / (4.0 * (2.0 * 0.4 + 1.0));
  CHECK(in_range);
  CHECK(std::abs(mean - 0.5) <= 0.01);
  CHECK(std::abs(var - want) <= 0.1 * want);
}

TEST_CASE("first batch seeds the mixup state unmixed") {
  MixupState s{{}, {}, 0.4, false};
  const auto b = filled(2, 1.0, 0);
  const auto out = running_mixup(s, b, 0.3);
  CHECK(out.inputs == b.inputs);
  CHECK(s.initialized);
  CHECK(s.prev_inputs == b.inputs);
}

TEST_CASE("mixup endpoints and midpoint") {
  MixupState s{{}, {}, 0.4, false};
  const auto zeros = filled(2, 0.0, 0);
  const auto ones = filled(2, 1.0, 2);
  running_mixup(s, zeros, 0.5);

  MixupState keep = s;
  CHECK(running_mixup(keep, ones, 1.0).inputs == ones.inputs);
  keep = s;
  CHECK(running_mixup(keep, ones, 0.0).inputs == zeros.inputs);

  const auto mid = running_mixup(s, ones, 0.5);
  for (double v : mid.inputs.values())
    CHECK(v == 0.5);
  for (std::size_t n = 0; n < 2; ++n) {
    double row = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(mid.labels[n * 3 + k] >= 0.0);
      row += mid.labels[n * 3 + k];
    }
    CHECK(row == doctest::Approx(1.0));
  }
  // the state carries the virtual batch forward
  CHECK(s.prev_inputs == mid.inputs);
}

TEST_CASE("mixup is deterministic") {
  MixupState a{{}, {}, 0.4, false}, b{{}, {}, 0.4, false};
  running_mixup(a, filled(2, 1.0, 1), 0.7);
  running_mixup(b, filled(2, 1.0, 1), 0.7);
  CHECK(running_mixup(a, filled(2, 3.0, 0), 0.25).inputs == running_mixup(b, filled(2, 3.0, 0), 0.25).inputs);
}

TEST_CASE("per-sample mixup weights rows independently") {
  MixupState s{{}, {}, 0.4, false};
  running_mixup(s, filled(2, 0.0, 0), 0.5);
  const std::vector<double> lambdas{1.0, 0.25};
  const auto out = running_mixup(s, filled(2, 4.0, 1), lambdas);
  CHECK(out.inputs[0] == 4.0);
  CHECK(out.inputs[4] == 1.0);
  CHECK_THROWS_AS(running_mixup(s, filled(2, 4.0, 1), std::vector<double>{0.5}), AugmentError);
}

TEST_CASE("erase with p = 0 is the identity") {
  std::mt19937_64 rng(3);
  const Tensor img({1, 8, 8}, 1.0);
  EraseConfig cfg;
  cfg.p = 0.0;
  CHECK(random_erase(img, cfg, rng) == img);
}

TEST_CASE("erased area lies in the configured range") {
  std::mt19937_64 rng(4);
  EraseConfig cfg;
  cfg.p = 1.0;
  int erased = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor img({3, 32, 32}, 1.0);
    const auto out = random_erase(img, cfg, rng);
    std::size_t zeros = 0;
    bool binary = true;
    for (double v : out.values()) {
      binary = binary && (v == 0.0 || v == 1.0);
      zeros += v == 0.0 ? 1 : 0;
    }
    CHECK(binary);
    if (zeros == 0)
      continue;
    ++erased;
    CHECK(zeros % 3 == 0);
    const double frac = static_cast<double>(zeros / 3) / 1024.0;
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.25);
  }
  CHECK(erased > 400);
}

TEST_CASE("erase frequency tracks p") {
  std::mt19937_64 rng(5);
  EraseConfig cfg;
  cfg.p = 0.5;
  cfg.s_min = 0.02;
  cfg.s_max = 0.1;
  int hits = 0;
  std::vector<double> img(16 * 16);
  for (int trial = 0; trial < 10000; ++trial) {
    std::fill(img.begin(), img.end(), 1.0);
    hits += random_erase(img, 1, 16, 16, cfg, rng) ? 1 : 0;
  }
  CHECK(std::abs(hits / 1e4 - 0.5) <= 0.02);
}

TEST_CASE("erase config validation") {
  EraseConfig cfg;
  cfg.s_min = 0.5;
  cfg.s_max = 0.1;
  CHECK_THROWS_AS(cfg.validate(), AugmentError);
  cfg = {};
  cfg.p = 1.5;
  CHECK_THROWS_AS(cfg.validate(), AugmentError);
}
