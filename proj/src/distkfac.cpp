// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/distkfac.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <sstream>
#include <thread>

#include "dkfac/metrics.hpp"

namespace dkfac {

namespace {

// Caught before any curvature work so a blown-up step does not surface as a
// failed factorization.
void check_loss(double loss, std::int64_t t) {
  if (!std::isfinite(loss))
    throw DivergenceError("non-finite training loss at iteration " + std::to_string(t));
}

} // namespace

StageError::StageError(int stage, std::size_t rank, const std::string& what)
    : std::runtime_error([&] {
        std::ostringstream oss;
        oss << "stage " << stage << " failed on worker " << rank << ": " << what;
        return oss.str();
      }()),
      stage_(stage), rank_(rank) {}

RefreshDecision staleness_controller(std::int64_t iteration, std::int64_t epoch,
                                     const StalenessConfig& cfg) {
  if (cfg.a_multiplier < 1)
    throw ScheduleError("staleness_controller: A interval multiplier must be at least 1");
  const std::int64_t g_interval = refresh_interval(epoch, cfg.heuristic);
  const std::int64_t a_interval = g_interval * cfg.a_multiplier;
  if (g_interval < 1)
    throw ScheduleError("staleness_controller: interval below 1");
  const bool fresh = iteration < cfg.fresh_floor;
  return {fresh || iteration % a_interval == 0, fresh || iteration % g_interval == 0,
          fresh || iteration % g_interval == 0};
}

std::optional<double> diff_metric(const DenseMatrix& current, const DenseMatrix& previous) {
  if (current.rows() != previous.rows() || current.cols() != previous.cols())
    throw LinalgError("diff_metric: shape mismatch");
  const double denom = frobenius_norm(previous);
  if (!(denom > 0.0))
    return std::nullopt;
  return frobenius_norm(current - previous) / denom;
}

struct Cluster::LocalResult {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::size_t micro_batches = 0;
  SegmentList segments;
};

Cluster::Cluster(const std::vector<LayerSpec>& specs, std::size_t workers, std::uint64_t seed,
                 KfacOptions options)
    : specs_(specs), options_(options), assignment_(assign_layers(specs.size(), workers)),
      ledger_(options.bytes_per_real) {
  if (options_.factor_ema < 0.0 || options_.factor_ema >= 1.0)
    throw std::invalid_argument("factor_ema must lie in [0, 1)");
  workers_.resize(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    workers_[w].rank = w;
    workers_[w].net = build_network(specs_, seed);
  }
}

template <typename Fn>
void Cluster::for_each_worker(int stage, Fn&& fn) {
  const std::size_t p = workers_.size();
  std::vector<std::exception_ptr> errors(p);
  auto run = [&](std::size_t w) {
    try {
      fn(w);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (options_.parallel && p > 1) {
    std::vector<std::thread> threads;
    threads.reserve(p);
    for (std::size_t w = 0; w < p; ++w)
      threads.emplace_back(run, w);
    for (auto& t : threads)
      t.join();
  } else {
    for (std::size_t w = 0; w < p; ++w)
      run(w);
  }
  for (std::size_t w = 0; w < p; ++w) {
    if (!errors[w])
      continue;
    try {
      std::rethrow_exception(errors[w]);
    } catch (const StageError&) {
      throw;
    } catch (const DivergenceError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, w, e.what());
    }
  }
}

std::vector<Cluster::LocalResult> Cluster::local_passes(
    const std::vector<std::vector<Batch>>& shards, const RefreshDecision* refresh) {
  const std::size_t p = workers_.size();
  if (shards.size() != p)
    throw std::invalid_argument("one shard list per worker required");
  const std::size_t micro = shards.front().size();
  if (micro == 0)
    throw std::invalid_argument("each worker needs at least one micro-batch");
  const std::size_t mb_size = shards.front().front().size();
  for (const auto& s : shards) {
    if (s.size() != micro)
      throw std::invalid_argument("workers must process the same number of micro-batches");
    for (const auto& b : s)
      if (b.size() != mb_size || mb_size == 0)
        throw std::invalid_argument("worker shards must be equal-sized and non-empty");
  }

  std::vector<LocalResult> results(p);
  for_each_worker(1, [&](std::size_t w) {
    Network& net = workers_[w].net;
    const std::size_t layers = net.size();
    LocalResult& r = results[w];
    std::vector<std::vector<double>> grad(layers);
    std::vector<DenseMatrix> a_sum(layers);
    std::vector<DenseMatrix> g_sum(layers);
    std::vector<DenseMatrix> f_full(layers);
    std::vector<std::vector<double>> f_diag(layers);

    for (const Batch& mb : shards[w]) {
      ForwardResult fr;
      try {
        fr = forward(net, mb);
      } catch (const std::exception& e) {
        throw StageError(1, w, e.what());
      }
      try {
        backward(net, fr.logits, mb.labels);
      } catch (const std::exception& e) {
        throw StageError(2, w, e.what());
      }
      r.loss_sum += fr.loss;
      const auto pred = argmax_rows(fr.logits);
      const auto truth = argmax_rows(mb.labels);
      for (std::size_t n = 0; n < pred.size(); ++n)
        r.correct += pred[n] == truth[n] ? 1 : 0;
      r.samples += mb.size();

      for (std::size_t l = 0; l < layers; ++l) {
        const Layer& layer = net[l];
        const auto& wg = layer.record.weight_grad.storage();
        if (grad[l].empty())
          grad[l].assign(wg.size(), 0.0);
        for (std::size_t k = 0; k < wg.size(); ++k)
          grad[l][k] += wg[k];
        if (!refresh)
          continue;
        auto accumulate = [](DenseMatrix& acc, const DenseMatrix& x) {
          if (acc.size() == 0)
            acc = x;
          else
            acc += x;
        };
        if (layer.spec.kind == LayerKind::batch_norm) {
          if (refresh->f_bn) {
            auto block = compute_bn_block(layer, options_.bn_mode);
            if (options_.bn_mode == BnFimMode::full) {
              accumulate(f_full[l], block.full);
            } else {
              if (f_diag[l].empty())
                f_diag[l].assign(block.diag.size(), 0.0);
              for (std::size_t k = 0; k < block.diag.size(); ++k)
                f_diag[l][k] += block.diag[k];
            }
          }
        } else {
          if (refresh->a)
            accumulate(a_sum[l], compute_a_factor(layer.record.captured_input));
          if (refresh->g)
            accumulate(g_sum[l], compute_g_factor(layer.record.captured_output_grad));
        }
      }
    }

    r.micro_batches = micro;
    const double inv = 1.0 / static_cast<double>(micro);
    for (std::size_t l = 0; l < layers; ++l) {
      for (auto& v : grad[l])
        v *= inv;
      r.segments.push_back({l, SegmentKind::grad, std::move(grad[l]), false});
      if (!refresh)
        continue;
      if (specs_[l].kind == LayerKind::batch_norm) {
        if (!refresh->f_bn)
          continue;
        if (options_.bn_mode == BnFimMode::full) {
          f_full[l] *= inv;
          r.segments.push_back({l, SegmentKind::bn_fisher, pack_symmetric(f_full[l]).values, true});
        } else {
          for (auto& v : f_diag[l])
            v *= inv;
          r.segments.push_back({l, SegmentKind::bn_fisher, std::move(f_diag[l]), false});
        }
      } else {
        if (refresh->a) {
          a_sum[l] *= inv;
          r.segments.push_back({l, SegmentKind::a_factor, pack_symmetric(a_sum[l]).values, true});
        }
        if (refresh->g) {
          g_sum[l] *= inv;
          r.segments.push_back({l, SegmentKind::g_factor, pack_symmetric(g_sum[l]).values, true});
        }
      }
    }
  });
  return results;
}

namespace {

DenseMatrix blend(const DenseMatrix& fresh, const DenseMatrix& old, double ema) {
  if (ema == 0.0 || old.size() == 0)
    return fresh;
  return ema * old + (1.0 - ema) * fresh;
}

DenseMatrix as_column(const std::vector<double>& v) { return DenseMatrix(v.size(), 1, v); }

} // namespace

void Cluster::apply_updates(const SegmentList& updates, const StepScalars& scalars) {
  for_each_worker(6, [&](std::size_t w) {
    Network& net = workers_[w].net;
    for (const auto& seg : updates) {
      Layer& layer = net.at(seg.layer_index);
      const Tensor step(layer.record.weights.shape(), seg.payload);
      apply_update(layer.record, step, scalars.eta, scalars.momentum);

      const LayerSpec& s = layer.spec;
      auto& wts = layer.record.weights;
      if (s.kind != LayerKind::batch_norm && options_.rescale_weights) {
        const std::size_t rows = s.g_dim();
        const std::size_t cols = s.a_dim();
        const std::size_t fan = s.fan_in();
        std::vector<double> body;
        body.reserve(rows * fan);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < fan; ++j)
            body.push_back(wts[i * cols + j]);
        const auto scaled = rescale_weights(body, rows);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < fan; ++j)
            wts[i * cols + j] = scaled[i * fan + j];
      } else if (s.kind == LayerKind::batch_norm && options_.rescale_bn) {
        const std::size_t c = s.in_dims.channels;
        const auto scaled = rescale_weights(std::span<const double>(wts.storage()).first(c), c);
        std::copy(scaled.begin(), scaled.end(), wts.storage().begin());
      }
    }
  });
}

IterationTrace Cluster::kfac_iteration(const std::vector<std::vector<Batch>>& shards,
                                       const StepScalars& scalars) {
  const std::int64_t t = scalars.iteration;
  const RefreshDecision refresh = staleness_controller(t, scalars.epoch_index, options_.staleness);

  // Stages 1-2: forward/backward and local factor construction.
  auto local = local_passes(shards, &refresh);

  IterationTrace trace;
  trace.iteration = t;
  trace.epoch = scalars.epoch;
  trace.gamma = scalars.gamma;
  trace.eta = scalars.eta;
  trace.momentum = scalars.momentum;
  trace.refresh = refresh;
  trace.refreshed = refresh.any();
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::size_t batches = 0;
  for (const auto& r : local) {
    trace.loss += r.loss_sum;
    correct += r.correct;
    samples += r.samples;
    batches += r.micro_batches;
  }
  trace.loss /= static_cast<double>(batches);
  trace.batch_accuracy = static_cast<double>(correct) / static_cast<double>(samples);
  check_loss(trace.loss, t);

  // Stage 3: data-parallel -> model-parallel.
  std::vector<SegmentList> contributions;
  contributions.reserve(local.size());
  for (auto& r : local)
    contributions.push_back(std::move(r.segments));
  std::vector<SegmentList> owned;
  try {
    owned = reduce_scatter_v(contributions, assignment_, &ledger_, t);
  } catch (const std::exception& e) {
    throw StageError(3, 0, e.what());
  }

  // Stages 4-5: damped inverses and preconditioned gradients for owned layers.
  const std::size_t p = workers_.size();
  std::vector<SegmentList> precond(p);
  std::vector<std::vector<std::pair<std::size_t, double>>> da(p), dg(p), df(p);
  for_each_worker(4, [&](std::size_t w) {
    auto& cur = workers_[w].curvature;
    const bool record = true;
    std::map<std::size_t, std::map<SegmentKind, const Segment*>> by_layer;
    for (const auto& seg : owned[w])
      by_layer[seg.layer_index][seg.kind] = &seg;
    for (const auto& [l, segs] : by_layer) {
      const LayerSpec& s = specs_[l];
      const bool primary = assignment_.primary_owner(l) == w && record;
      const Segment* g_seg = segs.at(SegmentKind::grad);
      std::vector<double> out;
      if (s.kind == LayerKind::batch_norm) {
        auto& block = cur.bn_blocks[l];
        if (auto it = segs.find(SegmentKind::bn_fisher); it != segs.end()) {
          BnFisherBlock fresh;
          fresh.mode = options_.bn_mode;
          std::optional<double> diff;
          if (fresh.mode == BnFimMode::full) {
            const auto m = unpack_symmetric({packed_dim(it->second->payload.size()), it->second->payload});
            fresh.full = blend(m, block.full, options_.factor_ema);
            if (block.full.size() > 0)
              diff = diff_metric(fresh.full, block.full);
          } else {
            const auto m = as_column(it->second->payload);
            const auto old = as_column(block.diag);
            const auto blended = blend(m, old, options_.factor_ema);
            fresh.diag = blended.storage();
            if (!block.diag.empty())
              diff = diff_metric(blended, old);
          }
          fresh.damping = scalars.gamma_bn;
          fresh.last_refresh = t;
          block = std::move(fresh);
          if (diff && primary)
            df[w].emplace_back(l, *diff);
        } else if (!block.last_refresh) {
          throw FimError("BN layer " + std::to_string(l) + " has no Fisher block to reuse");
        }
        out = precondition_bn(block, g_seg->payload, block.damping);
      } else {
        auto& pair = cur.pairs[l];
        bool refresh_inverse = false;
        if (auto it = segs.find(SegmentKind::a_factor); it != segs.end()) {
          const auto m = unpack_symmetric({packed_dim(it->second->payload.size()), it->second->payload});
          auto next = blend(m, pair.a_factor, options_.factor_ema);
          if (pair.a_factor.size() > 0 && primary)
            if (auto d = diff_metric(next, pair.a_factor))
              da[w].emplace_back(l, *d);
          pair.a_factor = std::move(next);
          refresh_inverse = true;
        }
        if (auto it = segs.find(SegmentKind::g_factor); it != segs.end()) {
          const auto m = unpack_symmetric({packed_dim(it->second->payload.size()), it->second->payload});
          auto next = blend(m, pair.g_factor, options_.factor_ema);
          if (pair.g_factor.size() > 0 && primary)
            if (auto d = diff_metric(next, pair.g_factor))
              dg[w].emplace_back(l, *d);
          pair.g_factor = std::move(next);
          refresh_inverse = true;
        }
        if (refresh_inverse && (pair.a_factor.size() == 0 || pair.g_factor.size() == 0))
          throw FimError("layer " + std::to_string(l) + " refreshed before both factors exist");
        const DenseMatrix grad(s.g_dim(), s.a_dim(), g_seg->payload);
        out = precondition(pair, grad, scalars.gamma, refresh_inverse, t).storage();
      }
      precond[w].push_back({l, SegmentKind::precond_grad, std::move(out), false});
    }
  });

  auto collect = [](std::vector<std::vector<std::pair<std::size_t, double>>>& parts) {
    std::vector<std::pair<std::size_t, double>> all;
    for (auto& v : parts)
      all.insert(all.end(), v.begin(), v.end());
    std::sort(all.begin(), all.end());
    std::vector<double> values;
    for (const auto& [l, v] : all)
      values.push_back(v);
    return values;
  };
  trace.diff_a = collect(da);
  trace.diff_g = collect(dg);
  trace.diff_f = collect(df);

  // Stage 6: model-parallel -> data-parallel.
  std::vector<SegmentList> gathered;
  try {
    gathered = all_gather_v(precond, assignment_, &ledger_, t);
  } catch (const std::exception& e) {
    throw StageError(6, 0, e.what());
  }

  // Every worker applies the same gathered update, so replicas stay identical.
  // Each worker reads its own copy of the gathered list.
  for_each_worker(6, [&](std::size_t w) {
    if (!(gathered[w] == gathered[0]))
      throw CollectiveError("gathered updates differ across workers");
  });
  apply_updates(gathered[0], scalars);

  trace.stage3_bytes = ledger_.bytes_sent(Collective::reduce_scatter_v, t);
  trace.stage6_bytes = ledger_.bytes_sent(Collective::all_gather_v, t);
  return trace;
}

IterationTrace Cluster::sgd_iteration(const std::vector<std::vector<Batch>>& shards,
                                      const StepScalars& scalars) {
  const std::int64_t t = scalars.iteration;
  auto local = local_passes(shards, nullptr);

  IterationTrace trace;
  trace.iteration = t;
  trace.epoch = scalars.epoch;
  trace.eta = scalars.eta;
  trace.momentum = scalars.momentum;
  trace.refreshed = false;
  trace.refresh = {false, false, false};
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::size_t batches = 0;
  std::vector<SegmentList> contributions;
  for (auto& r : local) {
    trace.loss += r.loss_sum;
    correct += r.correct;
    samples += r.samples;
    batches += r.micro_batches;
    contributions.push_back(std::move(r.segments));
  }
  trace.loss /= static_cast<double>(batches);
  trace.batch_accuracy = static_cast<double>(correct) / static_cast<double>(samples);
  check_loss(trace.loss, t);

  std::vector<SegmentList> reduced;
  try {
    reduced = all_reduce(contributions, &ledger_, t);
  } catch (const std::exception& e) {
    throw StageError(3, 0, e.what());
  }
  apply_updates(reduced[0], scalars);
  trace.stage3_bytes = ledger_.bytes_sent(Collective::all_reduce, t);
  return trace;
}

std::vector<double> Cluster::flat_parameters(std::size_t worker) const {
  std::vector<double> out;
  for (const auto& layer : workers_.at(worker).net) {
    const auto& w = layer.record.weights.storage();
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

bool Cluster::replicas_identical() const {
  const auto ref = flat_parameters(0);
  for (std::size_t w = 1; w < workers_.size(); ++w) {
    const auto other = flat_parameters(w);
    if (other.size() != ref.size() ||
        std::memcmp(other.data(), ref.data(), ref.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

} // namespace dkfac
