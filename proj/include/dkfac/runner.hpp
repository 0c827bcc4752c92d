// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkfac/augment.hpp"
#include "dkfac/config.hpp"
#include "dkfac/data.hpp"
#include "dkfac/distkfac.hpp"
#include "dkfac/metrics.hpp"

namespace dkfac {

/// Unreadable or unwritable files (exit code 3).
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kMetricsHeader =
    "iteration,epoch,lr,momentum,damping,train_loss,train_acc,val_acc,refresh_flag,"
    "diff_A_p50,diff_G_p50,diff_Fbn_p50,stage3_bytes,stage6_bytes";

struct MetricsRow {
  std::int64_t iteration = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double momentum = 0.0;
  std::optional<double> damping;
  double train_loss = 0.0;
  std::optional<double> train_acc;
  std::optional<double> val_acc;
  bool refresh_flag = false;
  std::optional<double> diff_a_p50;
  std::optional<double> diff_g_p50;
  std::optional<double> diff_f_p50;
  std::size_t stage3_bytes = 0;
  std::size_t stage6_bytes = 0;
};

void write_metrics_row(std::ostream& os, const MetricsRow& row);

/// Percentiles of one curvature kind across layers at one iteration.
struct DiffRecord {
  std::int64_t iteration = 0;
  std::string kind;  // A, G or Fbn
  PercentileSummary summary;
};

struct TrainOptions {
  /// Where metrics.csv, ledger.csv, fim_memory.csv and checkpoint.json go.
  std::optional<std::filesystem::path> out_dir;
  /// Stop once full-train-set accuracy reaches cfg.threshold.
  bool stop_at_threshold = false;
  /// File name prefix for the metrics CSV (compare writes two runs side by side).
  std::string metrics_name = "metrics.csv";
  bool write_checkpoint = true;
  std::function<void(const IterationTrace&, const MetricsRow&)> on_iteration;
};

struct TrainResult {
  std::int64_t iterations = 0;
  std::int64_t iterations_per_epoch = 0;
  double final_loss = 0.0;
  double final_train_acc = 0.0;
  std::optional<double> final_val_acc;
  std::optional<std::int64_t> iterations_to_threshold;
  std::size_t stage3_bytes = 0;
  std::size_t stage6_bytes = 0;
  std::vector<MetricsRow> rows;
  std::vector<IterationTrace> traces;
};

/// Loads data, builds the simulated worker pool and runs training.
class Trainer {
public:
  explicit Trainer(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  const Cluster& cluster() const { return cluster_; }
  const std::vector<LayerSpec>& specs() const { return cluster_.specs(); }
  const Dataset& train_set() const { return train_; }
  std::int64_t iteration() const { return t_; }
  std::int64_t iterations_per_epoch() const { return ipe_; }
  const std::vector<DiffRecord>& diff_history() const { return diffs_; }

  /// Trains until cfg.epochs are complete (continuing from a loaded checkpoint).
  TrainResult run(const TrainOptions& opts = {});

  /// Accuracy of worker 0's network in inference mode.
  double evaluate(const Dataset& d) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state and schedules. The checkpoint must
  /// come from a run with the same architecture and worker count.
  void load_checkpoint(const std::filesystem::path& path);

private:
  Trainer(RunConfig cfg, std::pair<Dataset, std::optional<Dataset>> data);
  std::vector<std::vector<Batch>> build_shards(const EpochPlan& plan, std::size_t it);
  StepScalars scalars() const;

  RunConfig cfg_;
  Dataset train_;
  std::optional<Dataset> val_;
  Cluster cluster_;
  std::int64_t ipe_ = 0;
  std::int64_t t_ = 0;
  double gamma_ = 0.0;
  std::vector<MixupState> mixup_;
  std::vector<DiffRecord> diffs_;
};

/// Defaults -> preset -> config file -> --set overrides -> KFAC_SEED.
RunConfig resolve_config(const std::optional<std::string>& preset_name,
                         const std::optional<std::filesystem::path>& config_path,
                         const std::vector<std::string>& overrides, const char* env_seed);

/// Loads the datasets a config describes (standardized with train statistics).
std::pair<Dataset, std::optional<Dataset>> load_datasets(const RunConfig& cfg);

/// Config text stored inside a checkpoint.
RunConfig checkpoint_config(const std::filesystem::path& path);
std::vector<DiffRecord> checkpoint_diff_history(const std::filesystem::path& path);

void write_diff_history_csv(std::ostream& os, const std::vector<DiffRecord>& history);

} // namespace dkfac
