// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkfac/collectives.hpp"
#include "dkfac/fim.hpp"
#include "dkfac/model.hpp"
#include "dkfac/schedules.hpp"

namespace dkfac {

/// A failure inside one stage of an iteration, tagged with stage (1-6) and rank.
class StageError : public std::runtime_error {
public:
  StageError(int stage, std::size_t rank, const std::string& what);
  int stage() const { return stage_; }
  std::size_t rank() const { return rank_; }

private:
  int stage_;
  std::size_t rank_;
};

struct StalenessConfig {
  IntervalHeuristic heuristic = IntervalHeuristic::off;
  /// Every iteration before this one refreshes all curvature matrices.
  std::int64_t fresh_floor = 50;
  /// A refreshes every a_multiplier G-intervals.
  std::int64_t a_multiplier = 1;
};

struct RefreshDecision {
  bool a = true;
  bool g = true;
  bool f_bn = true;

  bool any() const { return a || g || f_bn; }
  bool operator==(const RefreshDecision&) const = default;
};

/// refresh(kind) = t < fresh_floor or t mod interval(kind, epoch) == 0.
RefreshDecision staleness_controller(std::int64_t iteration, std::int64_t epoch,
                                     const StalenessConfig& cfg);

/// ||current - previous||_F / ||previous||_F; empty when previous is zero.
std::optional<double> diff_metric(const DenseMatrix& current, const DenseMatrix& previous);

struct KfacOptions {
  StalenessConfig staleness;
  BnFimMode bn_mode = BnFimMode::full;
  bool rescale_weights = false;
  bool rescale_bn = false;
  /// Weight on the previous factor when a refresh arrives (0 = single-batch estimate).
  double factor_ema = 0.0;
  /// Run per-worker stages on threads instead of a rank-ordered loop.
  bool parallel = false;
  /// Bytes charged per communicated element in the ledger.
  std::size_t bytes_per_real = sizeof(double);
};

/// Scalars the orchestrator broadcasts at the start of an iteration.
struct StepScalars {
  std::int64_t iteration = 0;
  std::int64_t epoch_index = 0;
  double epoch = 0.0;
  double gamma = 0.0;
  double gamma_bn = 0.0;
  double eta = 0.0;
  double momentum = 0.0;
};

struct IterationTrace {
  std::int64_t iteration = 0;
  double epoch = 0.0;
  double loss = 0.0;
  /// Accuracy on the (possibly augmented) global batch against argmax labels.
  double batch_accuracy = 0.0;
  double gamma = 0.0;
  double eta = 0.0;
  double momentum = 0.0;
  bool refreshed = false;
  RefreshDecision refresh;
  std::vector<double> diff_a;
  std::vector<double> diff_g;
  std::vector<double> diff_f;
  std::size_t stage3_bytes = 0;
  std::size_t stage6_bytes = 0;
};

/// Curvature state a worker keeps for the layers it owns.
struct OwnedCurvature {
  std::map<std::size_t, KroneckerPair> pairs;
  std::map<std::size_t, BnFisherBlock> bn_blocks;
};

struct Worker {
  std::size_t rank = 0;
  Network net;
  OwnedCurvature curvature;
};

/// Simulated pool of P data-parallel replicas running the six-stage K-FAC
/// iteration with in-process collectives.
class Cluster {
public:
  Cluster(const std::vector<LayerSpec>& specs, std::size_t workers, std::uint64_t seed,
          KfacOptions options = {});

  std::size_t worker_count() const { return workers_.size(); }
  std::size_t layer_count() const { return specs_.size(); }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  const KfacOptions& options() const { return options_; }
  const WorkerAssignment& assignment() const { return assignment_; }

  std::vector<Worker>& workers() { return workers_; }
  const std::vector<Worker>& workers() const { return workers_; }
  const Network& network(std::size_t worker = 0) const { return workers_.at(worker).net; }

  CommLedger& ledger() { return ledger_; }
  const CommLedger& ledger() const { return ledger_; }

  /// One K-FAC iteration. shards[w] holds worker w's micro-batches (more than
  /// one when gradients are accumulated); all must have equal size.
  IterationTrace kfac_iteration(const std::vector<std::vector<Batch>>& shards,
                                const StepScalars& scalars);

  /// Data-parallel SGD with momentum: mean-AllReduce of gradients.
  IterationTrace sgd_iteration(const std::vector<std::vector<Batch>>& shards,
                               const StepScalars& scalars);

  /// All trainable parameters of one replica, layer by layer.
  std::vector<double> flat_parameters(std::size_t worker = 0) const;
  bool replicas_identical() const;

private:
  struct LocalResult;

  std::vector<LocalResult> local_passes(const std::vector<std::vector<Batch>>& shards,
                                        const RefreshDecision* refresh);
  template <typename Fn>
  void for_each_worker(int stage, Fn&& fn);
  void apply_updates(const SegmentList& updates, const StepScalars& scalars);

  std::vector<LayerSpec> specs_;
  KfacOptions options_;
  WorkerAssignment assignment_;
  std::vector<Worker> workers_;
  CommLedger ledger_;
};

} // namespace dkfac
