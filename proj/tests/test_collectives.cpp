// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "dkfac/collectives.hpp"
#include "dkfac/linalg.hpp"

using namespace dkfac;

namespace {

// Random schema shared by all workers, random payloads per worker.
std::vector<SegmentList> random_contributions(std::size_t p, std::size_t layers, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 12);
  std::normal_distribution<double> nd;
  SegmentList schema;
  for (std::size_t l = 0; l < layers; ++l) {
    schema.push_back({l, SegmentKind::grad, std::vector<double>(len(rng)), false});
    if (rng() % 2)
      schema.push_back({l, SegmentKind::a_factor, std::vector<double>(packed_length(len(rng) % 5 + 1)), true});
  }
  std::vector<SegmentList> out(p, schema);
  for (auto& w : out)
    for (auto& s : w)
      for (auto& v : s.payload)
        v = nd(rng);
  return out;
}

// gather-all, mean in rank order, route to owners
std::vector<SegmentList> sequential_oracle(const std::vector<SegmentList>& in, const WorkerAssignment& a) {
  const std::size_t p = in.size();
  std::vector<SegmentList> out(p);
  for (std::size_t s = 0; s < in[0].size(); ++s) {
    Segment mean = in[0][s];
    for (std::size_t k = 0; k < mean.payload.size(); ++k) {
      double acc = 0.0;
      for (std::size_t w = 0; w < p; ++w)
        acc += in[w][s].payload[k];
      mean.payload[k] = acc / static_cast<double>(p);
    }
    for (std::size_t w : a.owners(mean.layer_index))
      out[w].push_back(mean);
  }
  return out;
}

} // namespace

TEST_CASE("round-robin assignment") {
  const auto a = assign_layers(3, 2);
  CHECK(a.layers_of(0) == std::vector<std::size_t>{0, 2});
  CHECK(a.layers_of(1) == std::vector<std::size_t>{1});
  const auto b = assign_layers(4, 4);
  for (std::size_t l = 0; l < 4; ++l)
    CHECK(b.owners(l) == std::vector<std::size_t>{l});
  const auto c = assign_layers(2, 5);
  for (std::size_t w = 0; w < 5; ++w)
    CHECK_FALSE(c.layers_of(w).empty());
  CHECK(c.owners(0).size() >= 2);
  CHECK(c.owners(1).size() >= 2);
}

TEST_CASE("reduce-scatter hand mean") {
  const auto a = assign_layers(2, 2);  // layer 1 -> worker 1
  std::vector<SegmentList> in{{{0, SegmentKind::grad, {1, 1}, false}, {1, SegmentKind::grad, {2, 4}, false}},
                              {{0, SegmentKind::grad, {3, 3}, false}, {1, SegmentKind::grad, {4, 8}, false}}};
  const auto out = reduce_scatter_v(in, a);
  REQUIRE(out[1].size() == 1);
  CHECK(out[1][0].payload == std::vector<double>{3, 6});
  REQUIRE(out[0].size() == 1);
  CHECK(out[0][0].layer_index == 0);
}

TEST_CASE("P = 1 is identity delivery") {
  std::mt19937_64 rng(1);
  const auto in = random_contributions(1, 3, rng);
  const auto a = assign_layers(3, 1);
  CHECK(reduce_scatter_v(in, a)[0] == in[0]);
  CHECK(all_gather_v(in, a)[0] == in[0]);
}

TEST_CASE("reduce-scatter equals the sequential oracle bitwise") {
  std::mt19937_64 rng(2);
  for (std::size_t p : {2u, 3u, 4u})
    for (std::size_t layers : {1u, 3u, 6u}) {
      const auto in = random_contributions(p, layers, rng);
      const auto a = assign_layers(layers, p);
      CHECK(reduce_scatter_v(in, a) == sequential_oracle(in, a));
    }
}

TEST_CASE("all-gather broadcasts owned segments") {
  const auto a = assign_layers(2, 2);
  std::vector<SegmentList> owned{{{0, SegmentKind::precond_grad, {1, 2}, false}},
                                 {{1, SegmentKind::precond_grad, {3}, false}}};
  const auto out = all_gather_v(owned, a);
  CHECK(out[0] == out[1]);
  REQUIRE(out[0].size() == 2);
  CHECK(out[0][1].payload == std::vector<double>{3});
}

TEST_CASE("redundant owners must agree") {
  const auto a = assign_layers(1, 2);
  std::vector<SegmentList> owned{{{0, SegmentKind::precond_grad, {1, 2}, false}},
                                 {{0, SegmentKind::precond_grad, {1, 2}, false}}};
  CHECK_NOTHROW(all_gather_v(owned, a));
  owned[1][0].payload[1] = 2.0000001;
  CHECK_THROWS_AS(all_gather_v(owned, a), CollectiveError);
}

TEST_CASE("reduce-scatter then all-gather equals all-reduce bitwise") {
  std::mt19937_64 rng(3);
  for (std::size_t p : {2u, 3u, 4u})
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t layers = 1 + rng() % 7;
      const auto in = random_contributions(p, layers, rng);
      const auto a = assign_layers(layers, p);
      const auto composite = all_gather_v(reduce_scatter_v(in, a), a);
      const auto direct = all_reduce(in);
      for (std::size_t w = 0; w < p; ++w)
        CHECK(composite[w] == direct[w]);
    }
}

TEST_CASE("schema mismatch is rejected") {
  const auto a = assign_layers(1, 2);
  std::vector<SegmentList> in{{{0, SegmentKind::grad, {1, 2}, false}}, {{0, SegmentKind::grad, {1}, false}}};
  CHECK_THROWS_AS(reduce_scatter_v(in, a), CollectiveError);
}

TEST_CASE("ledger counts and conservation") {
  std::mt19937_64 rng(4);
  const std::size_t p = 3;
  const auto in = random_contributions(p, 5, rng);
  const auto a = assign_layers(5, p);
  CommLedger ledger;
  const auto owned = reduce_scatter_v(in, a, &ledger, 7);
  all_gather_v(owned, a, &ledger, 7);
  for (auto c : {Collective::reduce_scatter_v, Collective::all_gather_v}) {
    CHECK(ledger.elements_sent(c, 7) == ledger.elements_received(c, 7));
    CHECK(ledger.calls(c, 7) == 1);
  }
  std::size_t packed = 0;
  for (const auto& s : in[0])
    if (s.packed)
      packed += s.payload.size();
  CHECK(ledger.elements_sent(Collective::reduce_scatter_v, 7, 1) == p * packed);
  CHECK(ledger.bytes_sent(Collective::reduce_scatter_v, 7) ==
        8 * ledger.elements_sent(Collective::reduce_scatter_v, 7));
}

TEST_CASE("packed traffic for a 100x100 factor") {
  const auto a = assign_layers(1, 1);
  CommLedger ledger;
  std::vector<SegmentList> in{{{0, SegmentKind::a_factor, std::vector<double>(packed_length(100)), true}}};
  reduce_scatter_v(in, a, &ledger, 0);
  const auto totals = ledger_report(ledger, 1);
  CHECK(totals[0].packed_elements == 5050u);
  CHECK(static_cast<double>(totals[0].packed_elements) / 10000.0 == doctest::Approx(101.0 / 200.0));

  const auto none = ledger_report(CommLedger{}, 2);
  CHECK(none[0].elements() == 0u);
  CHECK(none[1].bytes == 0u);
}
