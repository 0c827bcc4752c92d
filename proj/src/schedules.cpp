// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/schedules.hpp"

#include <algorithm>
#include <cmath>

namespace dkfac {

std::string to_string(IntervalHeuristic h) {
  switch (h) {
  case IntervalHeuristic::off:
    return "off";
  case IntervalHeuristic::rampup:
    return "rampup";
  case IntervalHeuristic::step13:
    return "step13";
  }
  return "off";
}

IntervalHeuristic parse_interval_heuristic(const std::string& name) {
  if (name == "off")
    return IntervalHeuristic::off;
  if (name == "rampup")
    return IntervalHeuristic::rampup;
  if (name == "step13")
    return IntervalHeuristic::step13;
  throw ScheduleError("unknown refresh interval heuristic '" + name + "'");
}

double damping_alpha(const DampingConfig& cfg) {
  if (cfg.t_warmup <= 0)
    throw ScheduleError("t_warmup must be positive");
  return 2.0 * std::log10(cfg.gamma0 / cfg.gamma_target) / static_cast<double>(cfg.t_warmup);
}

double damping_step(const DampingConfig& cfg, double gamma_t) {
  if (!(gamma_t > 0.0))
    throw ScheduleError("damping must be positive");
  const double alpha = damping_alpha(cfg);
  return (1.0 - alpha) * gamma_t + alpha * cfg.gamma_target;
}

double bn_damping(double gamma_t, double rho_bn) { return rho_bn * gamma_t; }

double learning_rate(const LrMomentumConfig& cfg, double epoch) {
  if (epoch <= cfg.e_start)
    return cfg.eta0;
  if (epoch >= cfg.e_end)
    return 0.0;
  const double base = 1.0 - (epoch - cfg.e_start) / (cfg.e_end - cfg.e_start);
  return cfg.eta0 * std::pow(base, cfg.p_decay);
}

double momentum(const LrMomentumConfig& cfg, double eta_e) {
  if (!(cfg.eta0 > 0.0))
    throw ScheduleError("eta0 must be positive");
  return cfg.m0 / cfg.eta0 * eta_e;
}

std::vector<double> rescale_weights(std::span<const double> w, std::size_t d_out, double eps) {
  if (d_out == 0)
    throw ScheduleError("rescale_weights: d_out must be at least 1");
  double sq = 0.0;
  for (double v : w)
    sq += v * v;
  const double factor = std::sqrt(2.0 * static_cast<double>(d_out)) / (std::sqrt(sq) + eps);
  std::vector<double> out(w.begin(), w.end());
  for (auto& v : out)
    v *= factor;
  return out;
}

std::int64_t refresh_interval(std::int64_t epoch, IntervalHeuristic heuristic) {
  if (epoch < 0)
    throw ScheduleError("refresh_interval: negative epoch");
  switch (heuristic) {
  case IntervalHeuristic::off:
    return 1;
  case IntervalHeuristic::rampup:
    return std::min<std::int64_t>(20, 5 * (epoch / 5) + 1);
  case IntervalHeuristic::step13:
    return epoch < 13 ? 1 : 20;
  }
  throw ScheduleError("unknown refresh interval heuristic");
}

} // namespace dkfac
