// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace dkfac {

std::vector<std::int32_t> argmax_rows(const Tensor& t) {
  if (t.rank() == 0)
    return {};
  const std::size_t m = t.dim(0);
  std::vector<std::int32_t> out(m);
  for (std::size_t n = 0; n < m; ++n) {
    auto row = t.slice(n);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best])
        best = k;
    out[n] = static_cast<std::int32_t>(best);
  }
  return out;
}

double top1_accuracy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() == 0 || logits.dim(0) == 0)
    throw MetricsError("top1_accuracy: empty batch");
  if (logits.dim(0) != labels.size())
    throw MetricsError("top1_accuracy: label count does not match logits");
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < pred.size(); ++n)
    correct += pred[n] == labels[n] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double percentile(std::vector<double> values, double q) {
  if (values.empty())
    throw MetricsError("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

PercentileSummary percentiles(std::span<const double> values) {
  std::vector<double> v(values.begin(), values.end());
  if (v.empty())
    throw MetricsError("percentiles: empty input");
  std::sort(v.begin(), v.end());
  return {percentile(v, 5), percentile(v, 25), percentile(v, 50), percentile(v, 75),
          percentile(v, 95)};
}

} // namespace dkfac
