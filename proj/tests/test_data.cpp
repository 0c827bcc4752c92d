// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dkfac/data.hpp"
#include "digit_fixture.hpp"

using namespace dkfac;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dkfac-test-data-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("synthetic classes are balanced and deterministic") {
  const auto a = synth_gaussian_classes(3, 40, {1, 2, 2}, 9);
  const auto b = synth_gaussian_classes(3, 40, {1, 2, 2}, 9);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 120);
  std::vector<int> count(3, 0);
  for (auto l : a.labels)
    ++count[l];
  CHECK(count == std::vector<int>{40, 40, 40});
  CHECK_FALSE(synth_gaussian_classes(3, 40, {1, 2, 2}, 10).images == a.images);
  CHECK_THROWS_AS(synth_gaussian_classes(9, 4, {1, 2, 2}, 1), DataError);
}

TEST_CASE("two synthetic classes are linearly separable to 95%") {
  // Logistic regression fitted by plain gradient descent in the test itself.
  const auto d = synth_gaussian_classes(2, 100, {1, 4, 4}, 3);
  const std::size_t dim = 16;
  std::vector<double> w(dim + 1, 0.0);
  for (int it = 0; it < 500; ++it) {
    std::vector<double> g(dim + 1, 0.0);
    for (std::size_t n = 0; n < d.size(); ++n) {
      auto x = d.images.slice(n);
      double z = w[dim];
      for (std::size_t k = 0; k < dim; ++k)
        z += w[k] * x[k];
      const double err = 1.0 / (1.0 + std::exp(-z)) - d.labels[n];
      for (std::size_t k = 0; k < dim; ++k)
        g[k] += err * x[k];
      g[dim] += err;
    }
    for (std::size_t k = 0; k <= dim; ++k)
      w[k] -= 0.5 * g[k] / d.size();
  }
  std::size_t correct = 0;
  for (std::size_t n = 0; n < d.size(); ++n) {
    auto x = d.images.slice(n);
    double z = w[dim];
    for (std::size_t k = 0; k < dim; ++k)
      z += w[k] * x[k];
    correct += (z > 0) == (d.labels[n] == 1) ? 1 : 0;
  }
  CHECK(correct >= 190);
}

TEST_CASE("hand-crafted 4-image IDX fixture") {
  const auto dir = scratch("four");
  std::vector<std::uint8_t> img{0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 3};
  for (int k = 0; k < 4 * 6; ++k)
    img.push_back(static_cast<std::uint8_t>(k * 10));
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1});
  const auto d = load_idx(dir / "img", dir / "lab");
  CHECK(d.images.shape() == std::vector<std::size_t>{4, 1, 2, 3});
  CHECK(d.labels == std::vector<std::int32_t>{3, 1, 4, 1});
  CHECK(d.class_count == 5);
  CHECK(d.images[7] == doctest::Approx(70.0 / 255.0));
}

TEST_CASE("IDX error cases") {
  const auto dir = scratch("errors");
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 2, 1, 1});
  write_bytes(dir / "empty", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2});
  CHECK_THROWS_WITH_AS(load_idx(dir / "empty", dir / "lab"), doctest::Contains("truncated"), DataError);

  write_bytes(dir / "badmagic", {0, 0, 8, 4, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 5, 5});
  CHECK_THROWS_WITH_AS(load_idx(dir / "badmagic", dir / "lab"), doctest::Contains("magic"), DataError);

  write_bytes(dir / "three", {0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 1, 1, 2, 3});
  CHECK_THROWS_WITH_AS(load_idx(dir / "three", dir / "lab"), doctest::Contains("mismatch"), DataError);

  CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lab"), DataError);
}

TEST_CASE("write then load round trip") {
  const auto dir = scratch("digits");
  const auto files = fixture::write_digits(dir, "train", 50, 1);
  const auto d = load_idx(files.images, files.labels);
  CHECK(d.size() == 50);
  CHECK(d.class_count == 10);
  CHECK(d.sample_shape() == Shape3{1, 12, 12});
}

TEST_CASE("epoch plan arithmetic and sharding") {
  const auto d = synth_gaussian_classes(2, 50, {1, 1, 2}, 1);
  const auto plan = plan_epoch(d, 32, 1, 7, 0);
  CHECK(plan.iterations_per_epoch == 3);
  std::set<std::size_t> seen(plan.permutation.begin(), plan.permutation.end());
  CHECK(seen.size() == 100);
  CHECK(*seen.rbegin() == 99);

  const auto p4 = plan_epoch(d, 32, 4, 7, 0);
  CHECK(p4.permutation == plan.permutation);
  std::vector<std::size_t> joined;
  for (std::size_t w = 0; w < 4; ++w) {
    const auto s = p4.shard(1, w);
    CHECK(s.size() == 8);
    joined.insert(joined.end(), s.begin(), s.end());
  }
  const auto whole = plan.batch(1);
  CHECK(joined == std::vector<std::size_t>(whole.begin(), whole.end()));
  CHECK(plan.shard(0, 0).size() == 32);

  CHECK_FALSE(plan_epoch(d, 32, 1, 7, 1).permutation == plan.permutation);
  CHECK_THROWS_AS(plan_epoch(d, 30, 4, 7, 0), DataError);
}

TEST_CASE("standardizer uses train statistics") {
  auto train = synth_gaussian_classes(2, 100, {2, 2, 2}, 4);
  auto other = synth_gaussian_classes(2, 10, {2, 2, 2}, 5);
  const auto s = Standardizer::fit(train);
  s.apply(train);
  const auto again = Standardizer::fit(train);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(std::abs(again.mean[c]) < 1e-12);
    CHECK(again.stddev[c] == doctest::Approx(1.0));
  }
  const double before = other.images[0];
  s.apply(other);
  CHECK(other.images[0] == doctest::Approx((before - s.mean[0]) / s.stddev[0]));
}

TEST_CASE("make_batch one-hot labels") {
  const auto d = synth_gaussian_classes(3, 2, {1, 1, 2}, 2);
  const std::vector<std::size_t> idx{5, 0};
  const auto b = make_batch(d, idx);
  CHECK(b.inputs.shape() == std::vector<std::size_t>{2, 1, 1, 2});
  CHECK(b.labels[0 * 3 + 2] == 1.0);
  CHECK(b.labels[1 * 3 + 0] == 1.0);
  CHECK(b.inputs[0] == d.images[10]);
}
