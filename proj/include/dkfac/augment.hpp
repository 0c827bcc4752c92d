// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <span>
#include <stdexcept>

#include "dkfac/model.hpp"
#include "dkfac/tensor.hpp"

namespace dkfac {

class AugmentError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Previous virtual batch for running mixup. Uninitialized until the first
/// batch passes through, which is returned unmixed and seeds the state.
struct MixupState {
  Tensor prev_inputs;
  Tensor prev_labels;
  double alpha_mixup = 0.0;
  bool initialized = false;
};

struct EraseConfig {
  double p = 0.5;
  double s_min = 0.02;
  double s_max = 0.25;
  double r_min = 0.3;
  double r_max = 1.0;

  void validate() const;
};

inline constexpr int kEraseAttempts = 10;

/// Beta(alpha, beta) draw via two gamma variates.
double sample_beta(double alpha, double beta, std::mt19937_64& rng);

/// x~ = lambda x + (1 - lambda) x~_prev, same for labels; state takes the result.
Batch running_mixup(MixupState& state, const Batch& batch, double lambda);

/// Per-sample variant: row n mixes with its own lambdas[n].
Batch running_mixup(MixupState& state, const Batch& batch, std::span<const double> lambdas);

/// Zeroes one random rectangle (all channels) of a {C, H, W} image in place
/// with probability p. Returns true when a region was erased.
bool random_erase(std::span<double> image, std::size_t channels, std::size_t height,
                  std::size_t width, const EraseConfig& cfg, std::mt19937_64& rng);

/// Value-returning form for a single {C, H, W} tensor.
Tensor random_erase(const Tensor& image, const EraseConfig& cfg, std::mt19937_64& rng);

} // namespace dkfac
