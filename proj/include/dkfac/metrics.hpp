// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dkfac/tensor.hpp"

namespace dkfac {

class MetricsError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct PercentileSummary {
  double p5 = 0.0;
  double p25 = 0.0;
  double p50 = 0.0;
  double p75 = 0.0;
  double p95 = 0.0;
};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double top1_accuracy(const Tensor& logits, std::span<const std::int32_t> labels);

/// Row argmax with the same tie rule; used to read hard labels off soft ones.
std::vector<std::int32_t> argmax_rows(const Tensor& t);

/// Linear interpolation between closest ranks: position q/100 * (n - 1).
double percentile(std::vector<double> values, double q);
PercentileSummary percentiles(std::span<const double> values);

} // namespace dkfac
