// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace dkfac {

class CollectiveError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class SegmentKind { grad, a_factor, g_factor, bn_fisher, precond_grad };

std::string to_string(SegmentKind kind);

/// One variable-length piece of a collective. Packed payloads carry the upper
/// triangle of a symmetric matrix (length d(d+1)/2).
struct Segment {
  std::size_t layer_index = 0;
  SegmentKind kind = SegmentKind::grad;
  std::vector<double> payload;
  bool packed = false;

  bool operator==(const Segment&) const = default;
};

using SegmentList = std::vector<Segment>;

/// Layer ownership for the model-parallel stages.
class WorkerAssignment {
public:
  WorkerAssignment() = default;
  WorkerAssignment(std::size_t workers, std::vector<std::vector<std::size_t>> layer_to_workers);

  std::size_t layer_count() const { return layer_to_workers_.size(); }
  std::size_t worker_count() const { return worker_to_layers_.size(); }
  const std::vector<std::size_t>& owners(std::size_t layer) const;
  const std::vector<std::size_t>& layers_of(std::size_t worker) const;
  std::size_t primary_owner(std::size_t layer) const { return owners(layer).front(); }
  bool owns(std::size_t worker, std::size_t layer) const;

private:
  std::vector<std::vector<std::size_t>> layer_to_workers_;
  std::vector<std::vector<std::size_t>> worker_to_layers_;
};

/// Round-robin layer -> worker. Surplus workers (P > L) take layers cyclically,
/// so some layers have several owners.
WorkerAssignment assign_layers(std::size_t layers, std::size_t workers);

enum class Collective { reduce_scatter_v, all_gather_v, all_reduce };

std::string to_string(Collective c);

/// Element and byte counts per (collective, iteration, worker, packed flag).
class CommLedger {
public:
  struct Key {
    Collective collective;
    std::int64_t iteration;
    std::size_t worker;
    bool packed;
    auto operator<=>(const Key&) const = default;
  };
  struct Count {
    std::size_t elements_sent = 0;
    std::size_t elements_received = 0;
  };

  explicit CommLedger(std::size_t bytes_per_element = sizeof(double))
      : bytes_per_element_(bytes_per_element) {}

  void record_send(Collective c, std::int64_t iteration, std::size_t worker, std::size_t elements,
                   bool packed);
  void record_receive(Collective c, std::int64_t iteration, std::size_t worker,
                      std::size_t elements, bool packed);

  const std::map<Key, Count>& entries() const { return entries_; }
  std::size_t bytes_per_element() const { return bytes_per_element_; }

  /// Total elements sent, optionally restricted to one iteration / packed flag.
  std::size_t elements_sent(Collective c, std::int64_t iteration = -1, int packed = -1) const;
  std::size_t elements_received(Collective c, std::int64_t iteration = -1) const;
  std::size_t bytes_sent(Collective c, std::int64_t iteration = -1) const {
    return elements_sent(c, iteration) * bytes_per_element_;
  }

  void note_call(Collective c, std::int64_t iteration) { ++calls_[{c, iteration}]; }
  /// Number of times collective `c` ran in `iteration` (-1: all iterations).
  std::size_t calls(Collective c, std::int64_t iteration = -1) const;

  /// CSV: collective,iteration,worker,elements,bytes,packed_flag (elements sent).
  void write_csv(std::ostream& os) const;

private:
  std::size_t bytes_per_element_;
  std::map<Key, Count> entries_;
  std::map<std::pair<Collective, std::int64_t>, std::size_t> calls_;
};

struct LedgerTotals {
  std::size_t packed_elements = 0;
  std::size_t unpacked_elements = 0;
  std::size_t bytes = 0;

  std::size_t elements() const { return packed_elements + unpacked_elements; }
};

/// Cumulative sent totals per worker over every collective.
std::vector<LedgerTotals> ledger_report(const CommLedger& ledger, std::size_t workers);

/// Elementwise mean over workers of each segment, summed in rank order 0..P-1,
/// delivered only to the layer's owners. Input: one identically-shaped
/// segment list per worker. Output: per worker, the segments it owns.
std::vector<SegmentList> reduce_scatter_v(const std::vector<SegmentList>& per_worker,
                                          const WorkerAssignment& assignment,
                                          CommLedger* ledger = nullptr,
                                          std::int64_t iteration = 0);

/// Every worker receives every owned segment. Redundant owners must agree bitwise.
/// Output lists are ordered by (layer_index, kind).
std::vector<SegmentList> all_gather_v(const std::vector<SegmentList>& owned,
                                      const WorkerAssignment& assignment,
                                      CommLedger* ledger = nullptr, std::int64_t iteration = 0);

/// Deterministic mean-AllReduce with the same rank-order summation.
std::vector<SegmentList> all_reduce(const std::vector<SegmentList>& per_worker,
                                    CommLedger* ledger = nullptr, std::int64_t iteration = 0);

} // namespace dkfac
