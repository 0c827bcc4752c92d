// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite differences against backward().

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dkfac/model.hpp"

namespace oracle {

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

inline dkfac::Batch random_batch(dkfac::Shape3 in, std::size_t m, std::size_t classes,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  dkfac::Batch b;
  b.inputs = dkfac::Tensor({m, in.channels, in.height, in.width});
  for (auto& v : b.inputs.values())
    v = nd(rng);
  b.labels = dkfac::Tensor({m, classes});
  for (std::size_t n = 0; n < m; ++n)
    b.labels[n * classes + rng() % classes] = 1.0;
  return b;
}

/// Relative error max(|a-b|)/max(|a|,|b|,1e-8) over every trainable entry.
inline GradCheck gradient_check(dkfac::Network net, const dkfac::Batch& batch, double eps = 1e-6) {
  auto fwd = dkfac::forward(net, batch);
  dkfac::backward(net, fwd.logits, batch.labels);
  std::vector<dkfac::Tensor> analytic;
  for (const auto& l : net)
    analytic.push_back(l.record.weight_grad);

  GradCheck out;
  for (std::size_t li = 0; li < net.size(); ++li) {
    auto& w = net[li].record.weights;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      w[k] = orig + eps;
      const double up = dkfac::forward(net, batch).loss;
      w[k] = orig - eps;
      const double down = dkfac::forward(net, batch).loss;
      w[k] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic[li][k];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      out.max_rel = std::max(out.max_rel, rel);
      ++out.checked;
    }
  }
  return out;
}

} // namespace oracle
