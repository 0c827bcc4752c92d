// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "dkfac/model.hpp"
#include "dkfac/tensor.hpp"

namespace dkfac {

/// Raised for unreadable, truncated or malformed data files.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Images {N, C, H, W} with integer class labels.
struct Dataset {
  Tensor images;
  std::vector<std::int32_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  Shape3 sample_shape() const;
};

inline constexpr double kSynthSeparation = 3.0;

/// Class-conditional Gaussians with unit within-class std. Class c has mean
/// +-3.0 along feature axis (c mod d), the sign flipping every d classes.
/// Samples are stored class by class, `per_class` each.
Dataset synth_gaussian_classes(std::size_t classes, std::size_t per_class, Shape3 dims,
                               std::uint64_t seed);

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image file (u8, N x H x W) and label file (u8, N). Pixels are
/// scaled to [0, 1]; images come back as {N, 1, H, W}.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes the matching pair of IDX files.
void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const std::uint8_t> pixels, std::size_t count, std::size_t height,
               std::size_t width, std::span<const std::uint8_t> labels);

/// Per-channel mean/std computed on a training split and applied unchanged elsewhere.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& train);
  void apply(Dataset& d) const;
};

struct EpochPlan {
  std::vector<std::size_t> permutation;
  std::size_t iterations_per_epoch = 0;
  std::size_t global_batch_size = 0;
  std::size_t workers = 1;

  std::size_t shard_size() const { return global_batch_size / workers; }
  /// Sample indices of the global batch for iteration `it` within the epoch.
  std::span<const std::size_t> batch(std::size_t it) const;
  /// Contiguous block of that batch for one worker.
  std::span<const std::size_t> shard(std::size_t it, std::size_t worker) const;
};

/// Seeded permutation of the dataset for (seed, epoch), cut into global batches
/// (tail dropped) and equal contiguous worker shards.
EpochPlan plan_epoch(const Dataset& dataset, std::size_t global_batch, std::size_t workers,
                     std::uint64_t seed, std::int64_t epoch);

/// Gathers samples into a batch with one-hot labels.
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);

} // namespace dkfac
