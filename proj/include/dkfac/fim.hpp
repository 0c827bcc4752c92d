// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"
#include "dkfac/model.hpp"

namespace dkfac {

class FimError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class BnFimMode { full, diagonal };

std::string to_string(BnFimMode mode);

/// Kronecker factors of one layer's Fisher block (F ~ G (x) A) plus the cached
/// damped inverses.
struct KroneckerPair {
  DenseMatrix a_factor;
  DenseMatrix g_factor;
  DenseMatrix a_inv;
  DenseMatrix g_inv;
  std::optional<std::int64_t> last_refresh;

  bool has_inverses() const { return last_refresh.has_value(); }
};

/// Batch-norm Fisher block over the concatenated (scale, shift) vector of
/// length 2C. Not Kronecker-factored.
struct BnFisherBlock {
  BnFimMode mode = BnFimMode::full;
  DenseMatrix full;
  std::vector<double> diag;
  /// Damping in effect when the block was last refreshed.
  double damping = 0.0;
  std::optional<std::int64_t> last_refresh;

  std::size_t dim() const { return mode == BnFimMode::full ? full.rows() : diag.size(); }
};

/// A = mean over captured rows of a a^T.
DenseMatrix compute_a_factor(const Tensor& captured_input);
/// G = mean over captured rows of g g^T (rows are per-sample loss gradients).
DenseMatrix compute_g_factor(const Tensor& captured_output_grad);

struct DampedFactors {
  DenseMatrix a;
  DenseMatrix g;
  double pi = 1.0;
};

/// Factored Tikhonov damping: A + pi*sqrt(gamma)*I and G + sqrt(gamma)/pi*I with
/// pi = sqrt((tr(A)/dim_A) / (tr(G)/dim_G)); pi = 1 when either trace is zero.
DampedFactors damp_factors(const DenseMatrix& a, const DenseMatrix& g, double gamma);
DampedFactors damp_factors(const KroneckerPair& pair, double gamma);

/// Preconditioned gradient (G_damped^-1 (x) A_damped^-1) vec(grad). When
/// `refresh` is set the damped inverses are recomputed from the pair's
/// current factors and last_refresh is set to `iteration`; otherwise the
/// cached inverses are used unchanged.
DenseMatrix precondition(KroneckerPair& pair, const DenseMatrix& grad, double gamma, bool refresh,
                         std::int64_t iteration);

/// Per-sample gradients of the per-sample loss with respect to (scale, shift),
/// one row of length 2C per sample.
DenseMatrix bn_sample_grads(const Layer& layer);

BnFisherBlock bn_block_from_sample_grads(const DenseMatrix& sample_grads, BnFimMode mode);
BnFisherBlock compute_bn_block(const Layer& layer, BnFimMode mode);

/// full: (F + gamma_bn I)^-1 grad; diagonal: grad_i / (diag_i + gamma_bn).
std::vector<double> precondition_bn(const BnFisherBlock& block, std::span<const double> grad,
                                    double gamma_bn);

struct FimMemoryRow {
  std::size_t layer_index = 0;
  LayerKind kind = LayerKind::fully_connected;
  std::size_t a_bytes = 0;
  std::size_t g_bytes = 0;
  std::size_t f_bn_bytes = 0;
  BnFimMode mode = BnFimMode::full;

  std::size_t total() const { return a_bytes + g_bytes + f_bn_bytes; }
};

struct FimMemoryReport {
  std::vector<FimMemoryRow> full;
  std::vector<FimMemoryRow> diagonal;
  std::size_t total_full = 0;
  std::size_t total_diagonal = 0;
};

/// Bytes held by dense A, G and BN Fisher storage per layer, in both BN modes.
FimMemoryReport fim_memory_report(const std::vector<LayerSpec>& layers,
                                  std::size_t bytes_per_real = 8);

/// CSV: layer_index,layer_kind,a_bytes,g_bytes,f_bn_bytes,mode (full rows, then diagonal rows).
void write_fim_memory_csv(std::ostream& os, const FimMemoryReport& report);

} // namespace dkfac
