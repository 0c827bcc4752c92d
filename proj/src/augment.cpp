// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/augment.hpp"

#include <cmath>
#include <utility>

namespace dkfac {

void EraseConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0))
    throw AugmentError("erase probability must lie in [0, 1]");
  if (!(s_min > 0.0 && s_min <= s_max && s_max <= 1.0))
    throw AugmentError("erase area ratio range must satisfy 0 < s_min <= s_max <= 1");
  if (!(r_min > 0.0 && r_min <= r_max && r_max <= 1.0))
    throw AugmentError("erase aspect range must satisfy 0 < r_min <= r_max <= 1");
}

double sample_beta(double alpha, double beta, std::mt19937_64& rng) {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw AugmentError("sample_beta: parameters must be positive");
  std::gamma_distribution<double> ga(alpha, 1.0);
  std::gamma_distribution<double> gb(beta, 1.0);
  for (;;) {
    const double x = ga(rng);
    const double y = gb(rng);
    // both gammas can underflow to zero for small shape parameters
    if (x + y > 0.0)
      return x / (x + y);
  }
}

namespace {

void check_shapes(const MixupState& state, const Batch& batch) {
  if (state.prev_inputs.shape() != batch.inputs.shape() ||
      state.prev_labels.shape() != batch.labels.shape())
    throw AugmentError("running_mixup: batch shape differs from the previous virtual batch");
}

Batch seed_state(MixupState& state, const Batch& batch) {
  state.prev_inputs = batch.inputs;
  state.prev_labels = batch.labels;
  state.initialized = true;
  return batch;
}

} // namespace

Batch running_mixup(MixupState& state, const Batch& batch, double lambda) {
  if (!state.initialized)
    return seed_state(state, batch);
  check_shapes(state, batch);
  Batch out = batch;
  for (std::size_t k = 0; k < out.inputs.size(); ++k)
    out.inputs[k] = lambda * batch.inputs[k] + (1.0 - lambda) * state.prev_inputs[k];
  for (std::size_t k = 0; k < out.labels.size(); ++k)
    out.labels[k] = lambda * batch.labels[k] + (1.0 - lambda) * state.prev_labels[k];
  state.prev_inputs = out.inputs;
  state.prev_labels = out.labels;
  return out;
}

Batch running_mixup(MixupState& state, const Batch& batch, std::span<const double> lambdas) {
  if (!state.initialized)
    return seed_state(state, batch);
  check_shapes(state, batch);
  const std::size_t m = batch.size();
  if (lambdas.size() != m)
    throw AugmentError("running_mixup: one lambda per sample required");
  Batch out = batch;
  const std::size_t xs = batch.inputs.stride0();
  const std::size_t ys = batch.labels.stride0();
  for (std::size_t n = 0; n < m; ++n) {
    const double l = lambdas[n];
    for (std::size_t k = n * xs; k < (n + 1) * xs; ++k)
      out.inputs[k] = l * batch.inputs[k] + (1.0 - l) * state.prev_inputs[k];
    for (std::size_t k = n * ys; k < (n + 1) * ys; ++k)
      out.labels[k] = l * batch.labels[k] + (1.0 - l) * state.prev_labels[k];
  }
  state.prev_inputs = out.inputs;
  state.prev_labels = out.labels;
  return out;
}

bool random_erase(std::span<double> image, std::size_t channels, std::size_t height,
                  std::size_t width, const EraseConfig& cfg, std::mt19937_64& rng) {
  if (image.size() != channels * height * width)
    throw AugmentError("random_erase: image size does not match shape");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (!(unit(rng) < cfg.p))
    return false;
  const double area = static_cast<double>(height * width);
  std::uniform_real_distribution<double> s_dist(cfg.s_min, cfg.s_max);
  std::uniform_real_distribution<double> r_dist(cfg.r_min, cfg.r_max);
  for (int attempt = 0; attempt < kEraseAttempts; ++attempt) {
    const double target = s_dist(rng) * area;
    const double aspect = r_dist(rng);
    auto he = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    auto we = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (unit(rng) < 0.5)
      std::swap(he, we);
    const double ratio = static_cast<double>(he * we) / area;
    if (he == 0 || we == 0 || he > height || we > width || ratio < cfg.s_min || ratio > cfg.s_max)
      continue;
    std::uniform_int_distribution<std::size_t> ty(0, height - he);
    std::uniform_int_distribution<std::size_t> tx(0, width - we);
    const std::size_t y0 = ty(rng);
    const std::size_t x0 = tx(rng);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = y0; y < y0 + he; ++y)
        for (std::size_t x = x0; x < x0 + we; ++x)
          image[(c * height + y) * width + x] = 0.0;
    return true;
  }
  return false;
}

Tensor random_erase(const Tensor& image, const EraseConfig& cfg, std::mt19937_64& rng) {
  if (image.rank() != 3)
    throw AugmentError("random_erase: expected a {C, H, W} image");
  Tensor out = image;
  random_erase(out.values(), image.dim(0), image.dim(1), image.dim(2), cfg, rng);
  return out;
}

} // namespace dkfac
