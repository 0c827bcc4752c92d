// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace dkfac {

/// Generator keyed by a tuple of integers, e.g. (seed, iteration, sample).
/// Streams depend only on the key, so any worker can reproduce them.
inline std::mt19937_64 keyed_rng(std::initializer_list<std::uint64_t> key) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * key.size());
  for (auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

/// Stream tags keep independent uses of the same seed apart.
enum class Stream : std::uint64_t {
  permutation = 1,
  mixup_lambda = 2,
  erase = 3,
  dataset = 4,
  validation = 5,
};

} // namespace dkfac
