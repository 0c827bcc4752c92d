// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dkfac {

class ScheduleError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct DampingConfig {
  double gamma0 = 2.5e-2;
  double gamma_target = 2.5e-4;
  double rho_bn = 16.0;
  std::int64_t t_warmup = 313;
};

struct LrMomentumConfig {
  double eta0 = 8.18e-3;
  double m0 = 0.997;
  double e_start = 1.0;
  double e_end = 53.0;
  double p_decay = 11.0;
};

enum class IntervalHeuristic { off, rampup, step13 };

std::string to_string(IntervalHeuristic h);
IntervalHeuristic parse_interval_heuristic(const std::string& name);

struct ScheduleState {
  double gamma = 0.0;
  double eta = 0.0;
  double momentum = 0.0;
  std::int64_t interval = 1;
};

/// Warmup rate alpha = 2*log10(gamma0/gamma_target)/t_warmup.
double damping_alpha(const DampingConfig& cfg);

/// gamma_{t+1} = (1 - alpha) gamma_t + alpha gamma_target.
double damping_step(const DampingConfig& cfg, double gamma_t);

double bn_damping(double gamma_t, double rho_bn);

/// Polynomial decay; eta0 for e <= e_start and 0 for e >= e_end.
double learning_rate(const LrMomentumConfig& cfg, double epoch);

/// Momentum with m/eta held at m0/eta0.
double momentum(const LrMomentumConfig& cfg, double eta_e);

inline constexpr double kRescaleEpsilon = 1e-9;

/// sqrt(2 d_out) * w / (||w|| + eps)
std::vector<double> rescale_weights(std::span<const double> w, std::size_t d_out,
                                    double eps = kRescaleEpsilon);

/// rampup: min(20, 5*floor(e/5) + 1); step13: 1 before epoch 13, 20 after; off: 1.
std::int64_t refresh_interval(std::int64_t epoch, IntervalHeuristic heuristic);

} // namespace dkfac
