// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/collectives.hpp"

#include <algorithm>
#include <cstring>
#include <ostream>
#include <sstream>

namespace dkfac {

std::string to_string(SegmentKind kind) {
  switch (kind) {
  case SegmentKind::grad:
    return "grad";
  case SegmentKind::a_factor:
    return "a_factor";
  case SegmentKind::g_factor:
    return "g_factor";
  case SegmentKind::bn_fisher:
    return "bn_fisher";
  case SegmentKind::precond_grad:
    return "precond_grad";
  }
  return "unknown";
}

std::string to_string(Collective c) {
  switch (c) {
  case Collective::reduce_scatter_v:
    return "reduce_scatter_v";
  case Collective::all_gather_v:
    return "all_gather_v";
  case Collective::all_reduce:
    return "all_reduce";
  }
  return "unknown";
}

WorkerAssignment::WorkerAssignment(std::size_t workers,
                                   std::vector<std::vector<std::size_t>> layer_to_workers)
    : layer_to_workers_(std::move(layer_to_workers)), worker_to_layers_(workers) {
  for (std::size_t l = 0; l < layer_to_workers_.size(); ++l) {
    auto& owners = layer_to_workers_[l];
    if (owners.empty())
      throw CollectiveError("layer " + std::to_string(l) + " has no owner");
    std::sort(owners.begin(), owners.end());
    for (auto w : owners) {
      if (w >= workers)
        throw CollectiveError("layer owner rank out of range");
      worker_to_layers_[w].push_back(l);
    }
  }
}

const std::vector<std::size_t>& WorkerAssignment::owners(std::size_t layer) const {
  if (layer >= layer_to_workers_.size())
    throw CollectiveError("layer " + std::to_string(layer) + " is not assigned");
  return layer_to_workers_[layer];
}

const std::vector<std::size_t>& WorkerAssignment::layers_of(std::size_t worker) const {
  return worker_to_layers_.at(worker);
}

bool WorkerAssignment::owns(std::size_t worker, std::size_t layer) const {
  const auto& o = owners(layer);
  return std::find(o.begin(), o.end(), worker) != o.end();
}

WorkerAssignment assign_layers(std::size_t layers, std::size_t workers) {
  if (layers == 0 || workers == 0)
    throw CollectiveError("assign_layers: need at least one layer and one worker");
  std::vector<std::vector<std::size_t>> map(layers);
  for (std::size_t w = 0; w < std::max(layers, workers); ++w)
    map[w % layers].push_back(w % workers);
  for (auto& owners : map) {
    std::sort(owners.begin(), owners.end());
    owners.erase(std::unique(owners.begin(), owners.end()), owners.end());
  }
  return WorkerAssignment(workers, std::move(map));
}

void CommLedger::record_send(Collective c, std::int64_t iteration, std::size_t worker,
                             std::size_t elements, bool packed) {
  entries_[{c, iteration, worker, packed}].elements_sent += elements;
}

void CommLedger::record_receive(Collective c, std::int64_t iteration, std::size_t worker,
                                std::size_t elements, bool packed) {
  entries_[{c, iteration, worker, packed}].elements_received += elements;
}

std::size_t CommLedger::elements_sent(Collective c, std::int64_t iteration, int packed) const {
  std::size_t total = 0;
  for (const auto& [k, v] : entries_)
    if (k.collective == c && (iteration < 0 || k.iteration == iteration) &&
        (packed < 0 || k.packed == (packed != 0)))
      total += v.elements_sent;
  return total;
}

std::size_t CommLedger::elements_received(Collective c, std::int64_t iteration) const {
  std::size_t total = 0;
  for (const auto& [k, v] : entries_)
    if (k.collective == c && (iteration < 0 || k.iteration == iteration))
      total += v.elements_received;
  return total;
}

std::size_t CommLedger::calls(Collective c, std::int64_t iteration) const {
  std::size_t total = 0;
  for (const auto& [k, v] : calls_)
    if (k.first == c && (iteration < 0 || k.second == iteration))
      total += v;
  return total;
}

void CommLedger::write_csv(std::ostream& os) const {
  os << "collective,iteration,worker,elements,bytes,packed_flag\n";
  for (const auto& [k, v] : entries_)
    os << to_string(k.collective) << ',' << k.iteration << ',' << k.worker << ','
       << v.elements_sent << ',' << v.elements_sent * bytes_per_element_ << ','
       << (k.packed ? 1 : 0) << '\n';
}

std::vector<LedgerTotals> ledger_report(const CommLedger& ledger, std::size_t workers) {
  std::vector<LedgerTotals> out(workers);
  for (const auto& [k, v] : ledger.entries()) {
    if (k.worker >= workers)
      continue;
    auto& t = out[k.worker];
    (k.packed ? t.packed_elements : t.unpacked_elements) += v.elements_sent;
    t.bytes += v.elements_sent * ledger.bytes_per_element();
  }
  return out;
}

namespace {

void check_schema(const std::vector<SegmentList>& per_worker) {
  if (per_worker.empty())
    throw CollectiveError("collective called with no workers");
  const auto& ref = per_worker.front();
  for (std::size_t w = 1; w < per_worker.size(); ++w) {
    const auto& list = per_worker[w];
    bool ok = list.size() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i)
      ok = list[i].layer_index == ref[i].layer_index && list[i].kind == ref[i].kind &&
           list[i].payload.size() == ref[i].payload.size() && list[i].packed == ref[i].packed;
    if (!ok) {
      std::ostringstream oss;
      oss << "segment schema of worker " << w << " differs from worker 0";
      throw CollectiveError(oss.str());
    }
  }
}

// Rank-ordered sum followed by division by P.
std::vector<double> rank_ordered_mean(const std::vector<SegmentList>& per_worker, std::size_t i) {
  std::vector<double> acc = per_worker[0][i].payload;
  for (std::size_t w = 1; w < per_worker.size(); ++w) {
    const auto& p = per_worker[w][i].payload;
    for (std::size_t k = 0; k < acc.size(); ++k)
      acc[k] += p[k];
  }
  const auto p = static_cast<double>(per_worker.size());
  for (auto& v : acc)
    v /= p;
  return acc;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

} // namespace

std::vector<SegmentList> reduce_scatter_v(const std::vector<SegmentList>& per_worker,
                                          const WorkerAssignment& assignment, CommLedger* ledger,
                                          std::int64_t iteration) {
  check_schema(per_worker);
  const std::size_t p = per_worker.size();
  if (assignment.worker_count() != p)
    throw CollectiveError("reduce_scatter_v: assignment worker count differs from participants");
  std::vector<SegmentList> out(p);
  const auto& ref = per_worker.front();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& owners = assignment.owners(ref[i].layer_index);
    Segment reduced{ref[i].layer_index, ref[i].kind, rank_ordered_mean(per_worker, i), ref[i].packed};
    const std::size_t n = reduced.payload.size();
    for (auto o : owners)
      out[o].push_back(reduced);
    if (ledger) {
      for (std::size_t w = 0; w < p; ++w)
        ledger->record_send(Collective::reduce_scatter_v, iteration, w, n * owners.size(),
                            reduced.packed);
      for (auto o : owners)
        ledger->record_receive(Collective::reduce_scatter_v, iteration, o, n * p, reduced.packed);
    }
  }
  if (ledger)
    ledger->note_call(Collective::reduce_scatter_v, iteration);
  return out;
}

std::vector<SegmentList> all_gather_v(const std::vector<SegmentList>& owned,
                                      const WorkerAssignment& assignment, CommLedger* ledger,
                                      std::int64_t iteration) {
  const std::size_t p = owned.size();
  if (p == 0 || assignment.worker_count() != p)
    throw CollectiveError("all_gather_v: assignment worker count differs from participants");

  using Key = std::pair<std::size_t, SegmentKind>;
  std::map<Key, const Segment*> gathered;
  std::map<Key, std::vector<std::size_t>> holders;
  for (std::size_t w = 0; w < p; ++w) {
    for (const auto& seg : owned[w]) {
      if (!assignment.owns(w, seg.layer_index)) {
        std::ostringstream oss;
        oss << "all_gather_v: worker " << w << " holds layer " << seg.layer_index
            << " which it does not own";
        throw CollectiveError(oss.str());
      }
      const Key key{seg.layer_index, seg.kind};
      auto [it, inserted] = gathered.emplace(key, &seg);
      if (!inserted && (it->second->packed != seg.packed || !bitwise_equal(it->second->payload, seg.payload))) {
        std::ostringstream oss;
        oss << "all_gather_v: redundant owners disagree on layer " << seg.layer_index << " "
            << to_string(seg.kind);
        throw CollectiveError(oss.str());
      }
      holders[key].push_back(w);
    }
  }
  for (const auto& [key, who] : holders) {
    if (who.size() != assignment.owners(key.first).size()) {
      std::ostringstream oss;
      oss << "all_gather_v: layer " << key.first << " " << to_string(key.second)
          << " missing on one of its owners";
      throw CollectiveError(oss.str());
    }
  }

  SegmentList all;
  all.reserve(gathered.size());
  for (const auto& [key, seg] : gathered) {
    all.push_back(*seg);
    if (ledger) {
      const std::size_t n = seg->payload.size();
      ledger->record_send(Collective::all_gather_v, iteration, assignment.primary_owner(key.first),
                          n * p, seg->packed);
      for (std::size_t w = 0; w < p; ++w)
        ledger->record_receive(Collective::all_gather_v, iteration, w, n, seg->packed);
    }
  }
  if (ledger)
    ledger->note_call(Collective::all_gather_v, iteration);
  return std::vector<SegmentList>(p, all);
}

std::vector<SegmentList> all_reduce(const std::vector<SegmentList>& per_worker, CommLedger* ledger,
                                    std::int64_t iteration) {
  check_schema(per_worker);
  const std::size_t p = per_worker.size();
  const auto& ref = per_worker.front();
  SegmentList reduced;
  reduced.reserve(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    reduced.push_back({ref[i].layer_index, ref[i].kind, rank_ordered_mean(per_worker, i), ref[i].packed});
    if (ledger) {
      const std::size_t n = ref[i].payload.size();
      for (std::size_t w = 0; w < p; ++w) {
        ledger->record_send(Collective::all_reduce, iteration, w, n, ref[i].packed);
        ledger->record_receive(Collective::all_reduce, iteration, w, n, ref[i].packed);
      }
    }
  }
  if (ledger)
    ledger->note_call(Collective::all_reduce, iteration);
  return std::vector<SegmentList>(p, reduced);
}

} // namespace dkfac
