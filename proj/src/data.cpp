// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "dkfac/random.hpp"

namespace dkfac {

Shape3 Dataset::sample_shape() const {
  if (images.rank() != 4)
    return {};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

Dataset synth_gaussian_classes(std::size_t classes, std::size_t per_class, Shape3 dims,
                               std::uint64_t seed) {
  const std::size_t d = dims.count();
  if (classes == 0 || per_class == 0 || d == 0)
    throw DataError("synth_gaussian_classes: classes, per_class and dims must be at least 1");
  if (classes > 2 * d)
    throw DataError("synth_gaussian_classes: at most 2*dims classes fit on distinct axes");
  Dataset out;
  out.class_count = classes;
  out.images = Tensor({classes * per_class, dims.channels, dims.height, dims.width});
  out.labels.resize(classes * per_class);
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(Stream::dataset)});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t axis = c % d;
    const double offset = (c / d) % 2 == 0 ? kSynthSeparation : -kSynthSeparation;
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t n = c * per_class + i;
      auto x = out.images.slice(n);
      for (std::size_t k = 0; k < d; ++k)
        x[k] = noise(rng);
      x[axis] += offset;
      out.labels[n] = static_cast<std::int32_t>(c);
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (buf.size() < offset + 4)
    throw DataError("truncated IDX header in " + path.string());
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(bytes, 4);
}

} // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const auto img_magic = read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    std::ostringstream oss;
    oss << "bad IDX image magic 0x" << std::hex << img_magic << " in " << images_path.string();
    throw DataError(oss.str());
  }
  const auto lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    std::ostringstream oss;
    oss << "bad IDX label magic 0x" << std::hex << lab_magic << " in " << labels_path.string();
    throw DataError(oss.str());
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t h = read_be32(img, 8, images_path);
  const std::size_t w = read_be32(img, 12, images_path);
  const std::size_t nl = read_be32(lab, 4, labels_path);
  if (n != nl) {
    std::ostringstream oss;
    oss << "IDX count mismatch: " << n << " images vs " << nl << " labels";
    throw DataError(oss.str());
  }
  if (img.size() < 16 + n * h * w)
    throw DataError("truncated IDX image payload in " + images_path.string());
  if (lab.size() < 8 + n)
    throw DataError("truncated IDX label payload in " + labels_path.string());
  if (n == 0)
    throw DataError("IDX files contain no samples");

  Dataset out;
  out.images = Tensor({n, 1, h, w});
  for (std::size_t k = 0; k < n * h * w; ++k)
    out.images[k] = static_cast<double>(img[16 + k]) / 255.0;
  out.labels.resize(n);
  std::int32_t max_label = 0;
  for (std::size_t k = 0; k < n; ++k) {
    out.labels[k] = lab[8 + k];
    max_label = std::max(max_label, out.labels[k]);
  }
  out.class_count = static_cast<std::size_t>(max_label) + 1;
  return out;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const std::uint8_t> pixels, std::size_t count, std::size_t height,
               std::size_t width, std::span<const std::uint8_t> labels) {
  if (pixels.size() != count * height * width || labels.size() != count)
    throw DataError("write_idx: buffer sizes do not match count and shape");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab)
    throw DataError("write_idx: cannot open output files");
  write_be32(img, kIdxImageMagic);
  write_be32(img, static_cast<std::uint32_t>(count));
  write_be32(img, static_cast<std::uint32_t>(height));
  write_be32(img, static_cast<std::uint32_t>(width));
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(count));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!img || !lab)
    throw DataError("write_idx: write failed");
}

Standardizer Standardizer::fit(const Dataset& train) {
  const auto shape = train.sample_shape();
  const std::size_t n = train.size();
  const std::size_t hw = shape.height * shape.width;
  Standardizer s;
  s.mean.assign(shape.channels, 0.0);
  s.stddev.assign(shape.channels, 1.0);
  const double count = static_cast<double>(n * hw);
  for (std::size_t c = 0; c < shape.channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < hw; ++k)
        sum += train.images[(i * shape.channels + c) * hw + k];
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = train.images[(i * shape.channels + c) * hw + k] - mu;
        sq += d * d;
      }
    const double sd = std::sqrt(sq / count);
    s.mean[c] = mu;
    s.stddev[c] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

void Standardizer::apply(Dataset& d) const {
  const auto shape = d.sample_shape();
  if (shape.channels != mean.size())
    throw DataError("standardizer channel count does not match dataset");
  const std::size_t hw = shape.height * shape.width;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t c = 0; c < shape.channels; ++c)
      for (std::size_t k = 0; k < hw; ++k) {
        auto& v = d.images[(i * shape.channels + c) * hw + k];
        v = (v - mean[c]) / stddev[c];
      }
}

std::span<const std::size_t> EpochPlan::batch(std::size_t it) const {
  if (it >= iterations_per_epoch)
    throw DataError("EpochPlan::batch: iteration beyond epoch");
  return std::span<const std::size_t>(permutation).subspan(it * global_batch_size, global_batch_size);
}

std::span<const std::size_t> EpochPlan::shard(std::size_t it, std::size_t worker) const {
  if (worker >= workers)
    throw DataError("EpochPlan::shard: worker out of range");
  return batch(it).subspan(worker * shard_size(), shard_size());
}

EpochPlan plan_epoch(const Dataset& dataset, std::size_t global_batch, std::size_t workers,
                     std::uint64_t seed, std::int64_t epoch) {
  if (workers == 0 || global_batch == 0 || global_batch % workers != 0) {
    std::ostringstream oss;
    oss << "global batch " << global_batch << " is not divisible by " << workers << " workers";
    throw DataError(oss.str());
  }
  EpochPlan plan;
  plan.global_batch_size = global_batch;
  plan.workers = workers;
  plan.iterations_per_epoch = dataset.size() / global_batch;
  plan.permutation.resize(dataset.size());
  std::iota(plan.permutation.begin(), plan.permutation.end(), std::size_t{0});
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(Stream::permutation),
                        static_cast<std::uint64_t>(epoch)});
  std::shuffle(plan.permutation.begin(), plan.permutation.end(), rng);
  return plan;
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  const auto shape = dataset.sample_shape();
  const std::size_t m = indices.size();
  Batch b;
  b.inputs = Tensor({m, shape.channels, shape.height, shape.width});
  b.labels = Tensor({m, dataset.class_count});
  for (std::size_t n = 0; n < m; ++n) {
    auto src = dataset.images.slice(indices[n]);
    std::copy(src.begin(), src.end(), b.inputs.slice(n).begin());
    b.labels[n * dataset.class_count + static_cast<std::size_t>(dataset.labels[indices[n]])] = 1.0;
  }
  return b;
}

} // namespace dkfac
