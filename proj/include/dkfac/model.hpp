// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"
#include "dkfac/tensor.hpp"

namespace dkfac {

enum class LayerKind { fully_connected, conv2d, batch_norm };

std::string to_string(LayerKind kind);

/// Per-sample activation shape (channels, height, width).
struct Shape3 {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t count() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::fully_connected;
  Shape3 in_dims;
  Shape3 out_dims;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;
  /// ReLU applied to the layer output. Captured output gradients are taken
  /// before the nonlinearity.
  bool relu = false;

  /// Weight fan-in excluding the bias coordinate.
  std::size_t fan_in() const;
  /// Dimension of the input-side Kronecker factor (fan_in plus the bias coordinate).
  std::size_t a_dim() const;
  /// Dimension of the output-side Kronecker factor (output channels or features).
  std::size_t g_dim() const;
  std::size_t parameter_count() const;
  /// Number of output spatial positions per sample (1 for fully connected).
  std::size_t positions() const { return out_dims.height * out_dims.width; }

  void validate() const;
};

LayerSpec fully_connected_spec(Shape3 in, std::size_t out_features, bool bias = true,
                               bool relu = false);
LayerSpec conv2d_spec(Shape3 in, std::size_t out_channels, std::size_t kernel,
                      std::size_t stride = 1, std::size_t padding = 0, bool bias = true,
                      bool relu = false);
LayerSpec batch_norm_spec(Shape3 in, bool relu = false);

/// Parameters and the per-iteration statistics K-FAC consumes.
///
/// Fully-connected and conv weights are stored as {out, fan_in (+1)} with the
/// bias in the last column. Batch-norm weights are {2, C}: scale row, shift row.
///
/// captured_input holds one row per (sample, output position) of layer inputs,
/// with a trailing 1 when the layer has a bias. captured_output_grad holds the
/// matching rows of per-sample loss gradients with respect to the layer's
/// pre-activation output (the mean-loss gradient times the batch size). For
/// batch norm both captures are {M, C*H*W}: normalized inputs and output
/// gradients.
struct LayerRecord {
  Tensor weights;
  Tensor weight_grad;
  Tensor captured_input;
  Tensor captured_output_grad;
  Tensor velocity;
};

struct BnRunningStats {
  std::vector<double> mean;
  std::vector<double> var;
};

inline constexpr double kBnEpsilon = 2e-5;
inline constexpr double kBnRunningMomentum = 0.9;

struct Layer {
  LayerSpec spec;
  LayerRecord record;
  BnRunningStats running;

  // forward cache used by backward
  Tensor pre_activation;
  std::vector<double> inv_std;
  bool has_forward = false;
};

using Network = std::vector<Layer>;

/// Inputs {M, C, H, W} and soft or one-hot labels {M, classes}.
struct Batch {
  Tensor inputs;
  Tensor labels;

  std::size_t size() const { return inputs.rank() == 0 ? 0 : inputs.dim(0); }
};

class ModelError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// He-normal weights (std sqrt(2/fan_in)), zero bias, BN scale 1 and shift 0,
/// zero velocity.
LayerRecord init_weights(const LayerSpec& spec, std::uint64_t seed);

/// Builds layers with per-layer seeds derived from `seed`. Consecutive specs
/// must chain (out_dims of one equals in_dims of the next).
Network build_network(const std::vector<LayerSpec>& specs, std::uint64_t seed);

struct ForwardResult {
  Tensor logits;
  double loss = 0.0;
};

/// Training-mode forward pass: batch statistics for BN, captures populated,
/// BN running statistics updated. Loss is the mean soft-label cross-entropy.
ForwardResult forward(Network& net, const Batch& batch);

/// Populates weight_grad and captured_output_grad for every layer.
void backward(Network& net, const Tensor& logits, const Tensor& labels);

/// Inference-mode logits; BN uses running statistics; nothing is captured.
Tensor predict(const Network& net, const Tensor& inputs);

/// Mean over rows of -sum_c y_c log softmax(z)_c.
double softmax_cross_entropy(const Tensor& logits, const Tensor& labels);

/// velocity <- -eta * precond_grad + m * velocity; weights <- weights + velocity.
/// Throws DivergenceError without touching the layer when any value is non-finite.
void apply_update(LayerRecord& layer, const Tensor& precond_grad, double eta, double m);

/// Weight gradient viewed as a matrix: {g_dim, a_dim} for FC/conv.
DenseMatrix weight_matrix(const Tensor& t);

} // namespace dkfac
