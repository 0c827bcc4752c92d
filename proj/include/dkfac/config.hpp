// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkfac/augment.hpp"
#include "dkfac/fim.hpp"
#include "dkfac/model.hpp"
#include "dkfac/schedules.hpp"

namespace dkfac {

/// Carries every violation found, not just the first.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

private:
  std::vector<std::string> problems_;
};

enum class LrSchedule { polynomial, constant };

struct RunConfig {
  std::string optimizer = "kfac";
  std::size_t workers = 1;
  bool parallel = false;
  std::size_t global_batch = 64;
  std::size_t grad_accumulation_steps = 1;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  std::string layers = "fc:16:relu,fc:classes";

  std::string dataset = "synth";
  std::size_t synth_classes = 2;
  std::size_t synth_per_class = 256;
  std::size_t synth_val_per_class = 64;
  std::size_t synth_channels = 1;
  std::size_t synth_height = 4;
  std::size_t synth_width = 4;
  std::string idx_train_images;
  std::string idx_train_labels;
  std::string idx_val_images;
  std::string idx_val_labels;

  double alpha_mixup = 0.0;
  std::string lambda_mode = "batch";
  EraseConfig erase{0.0, 0.02, 0.25, 0.3, 1.0};

  DampingConfig damping;
  LrMomentumConfig lr;
  LrSchedule lr_schedule = LrSchedule::polynomial;

  IntervalHeuristic staleness = IntervalHeuristic::off;
  std::int64_t fresh_floor = 50;
  std::int64_t a_multiplier = 1;
  BnFimMode bn_fim_mode = BnFimMode::full;
  bool rescale_weights = false;
  bool rescale_bn = false;
  double factor_ema = 0.0;

  double threshold = 0.95;
  double sgd_eta0 = 0.1;
  double sgd_m0 = 0.9;
  std::size_t bytes_per_real = 8;
  std::size_t eval_every = 1;

  std::size_t effective_batch() const { return global_batch * grad_accumulation_steps; }
};

/// Every accepted key, in canonical (sorted) order.
const std::vector<std::string>& config_keys();

/// Names accepted by preset(): bs4096 ... bs131072.
const std::vector<std::string>& preset_names();

/// Defaults with one row of the large-batch hyperparameter table applied.
RunConfig preset(const std::string& name);

/// Sets one key from its text form. Returns an error message, empty on success.
std::string set_key(RunConfig& cfg, const std::string& key, const std::string& value);

/// Flat `key = value` lines, `#` comments. Appends problems instead of throwing.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source,
                       std::vector<std::string>& problems);

/// `key=value` command-line override.
void apply_override(RunConfig& cfg, const std::string& assignment,
                    std::vector<std::string>& problems);

/// Range checks across all keys.
std::vector<std::string> validate(const RunConfig& cfg);

/// Throws ConfigError when validate() reports anything.
void require_valid(const RunConfig& cfg);

/// Canonical text: every key, sorted, shortest round-trip numbers.
std::string serialize(const RunConfig& cfg);

/// Defaults, then the text; validated.
RunConfig parse_config(const std::string& text);

std::string get_key(const RunConfig& cfg, const std::string& key);

/// Comma-separated layer tokens:
///   fc:<out|classes>[:nobias][:relu]
///   conv:<out>:<k>[:s<stride>][:p<pad>][:nobias][:relu]
///   bn[:relu]
std::vector<LayerSpec> parse_layers(const std::string& text, Shape3 input, std::size_t classes);

/// Round-trip-exact shortest decimal form.
std::string format_real(double v);

} // namespace dkfac
