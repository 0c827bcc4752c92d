// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <numeric>

#include "dkfac/metrics.hpp"

using namespace dkfac;

TEST_CASE("one-hot logits score 1") {
  const Tensor logits({3, 3}, {1, 0, 0, 0, 0, 1, 0, 1, 0});
  const std::vector<std::int32_t> labels{0, 2, 1};
  CHECK(top1_accuracy(logits, labels) == 1.0);
}

TEST_CASE("ties go to the lowest index") {
  const Tensor logits({4, 3});
  const std::vector<std::int32_t> labels{0, 1, 0, 2};
  CHECK(top1_accuracy(logits, labels) == 0.5);
}

TEST_CASE("hand count, three of four") {
  const Tensor logits({4, 2}, {2, 1, 0, 3, 5, 4, 1, 2});
  const std::vector<std::int32_t> labels{0, 1, 0, 0};
  CHECK(top1_accuracy(logits, labels) == 0.75);
}

TEST_CASE("accuracy errors") {
  CHECK_THROWS_AS(top1_accuracy(Tensor({0, 2}), std::vector<std::int32_t>{}), MetricsError);
  CHECK_THROWS_AS(top1_accuracy(Tensor({2, 2}), std::vector<std::int32_t>{0}), MetricsError);
}

TEST_CASE("percentiles") {
  const auto single = percentiles(std::vector<double>{4.2});
  CHECK(single.p5 == 4.2);
  CHECK(single.p95 == 4.2);

  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  const auto s = percentiles(v);
  CHECK(s.p50 == doctest::Approx(50.5));
  CHECK(s.p5 <= s.p25);
  CHECK(s.p25 <= s.p50);
  CHECK(s.p50 <= s.p75);
  CHECK(s.p75 <= s.p95);

  const auto c = percentiles(std::vector<double>(7, 3.0));
  CHECK(c.p5 == 3.0);
  CHECK(c.p95 == 3.0);

  CHECK(percentiles(std::vector<double>{0.5, 0.1, 0.3, 0.2, 0.4}).p50 == doctest::Approx(0.3));
  CHECK_THROWS_AS(percentiles(std::vector<double>{}), MetricsError);
}
