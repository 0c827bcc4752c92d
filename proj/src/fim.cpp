// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/fim.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

namespace dkfac {

std::string to_string(BnFimMode mode) { return mode == BnFimMode::full ? "full" : "diagonal"; }

namespace {

DenseMatrix rows_of(const Tensor& captured, const char* what) {
  if (captured.rank() != 2 || captured.dim(0) == 0)
    throw FimError(std::string(what) + ": empty capture");
  return DenseMatrix(captured.dim(0), captured.dim(1), captured.storage());
}

} // namespace

DenseMatrix compute_a_factor(const Tensor& captured_input) {
  return mean_outer_product(rows_of(captured_input, "compute_a_factor"));
}

DenseMatrix compute_g_factor(const Tensor& captured_output_grad) {
  return mean_outer_product(rows_of(captured_output_grad, "compute_g_factor"));
}

DampedFactors damp_factors(const DenseMatrix& a, const DenseMatrix& g, double gamma) {
  if (!(gamma > 0.0))
    throw FimError("damp_factors: gamma must be positive");
  const double ta = trace(a) / static_cast<double>(a.rows());
  const double tg = trace(g) / static_cast<double>(g.rows());
  double pi = 1.0;
  if (ta > 0.0 && tg > 0.0)
    pi = std::sqrt(ta / tg);
  const double root = std::sqrt(gamma);
  return {add_diagonal(a, pi * root), add_diagonal(g, root / pi), pi};
}

DampedFactors damp_factors(const KroneckerPair& pair, double gamma) {
  return damp_factors(pair.a_factor, pair.g_factor, gamma);
}

DenseMatrix precondition(KroneckerPair& pair, const DenseMatrix& grad, double gamma, bool refresh,
                         std::int64_t iteration) {
  if (refresh) {
    if (pair.last_refresh && iteration < *pair.last_refresh)
      throw FimError("precondition: refresh iteration precedes last_refresh");
    const auto damped = damp_factors(pair, gamma);
    pair.a_inv = invert_spd(damped.a);
    pair.g_inv = invert_spd(damped.g);
    pair.last_refresh = iteration;
  } else if (!pair.has_inverses()) {
    throw FimError("precondition: stale path requested but inverses were never computed");
  }
  return kron_matvec(pair.g_inv, pair.a_inv, grad);
}

DenseMatrix bn_sample_grads(const Layer& layer) {
  if (layer.spec.kind != LayerKind::batch_norm)
    throw FimError("bn_sample_grads: layer is not batch_norm");
  const auto& xhat = layer.record.captured_input;
  const auto& g = layer.record.captured_output_grad;
  if (xhat.empty() || g.empty() || xhat.shape() != g.shape())
    throw FimError("bn_sample_grads: captures missing; run forward and backward first");
  const std::size_t m = xhat.dim(0);
  const std::size_t c = layer.spec.in_dims.channels;
  const std::size_t hw = layer.spec.in_dims.height * layer.spec.in_dims.width;
  DenseMatrix out(m, 2 * c);
  for (std::size_t n = 0; n < m; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double ds = 0.0;
      double db = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t idx = (n * c + ch) * hw + k;
        ds += g[idx] * xhat[idx];
        db += g[idx];
      }
      out(n, ch) = ds;
      out(n, c + ch) = db;
    }
  return out;
}

BnFisherBlock bn_block_from_sample_grads(const DenseMatrix& sample_grads, BnFimMode mode) {
  if (sample_grads.rows() == 0)
    throw FimError("bn block: no samples");
  BnFisherBlock block;
  block.mode = mode;
  if (mode == BnFimMode::full) {
    block.full = mean_outer_product(sample_grads);
  } else {
    const std::size_t d = sample_grads.cols();
    block.diag.assign(d, 0.0);
    for (std::size_t r = 0; r < sample_grads.rows(); ++r)
      for (std::size_t i = 0; i < d; ++i)
        block.diag[i] += sample_grads(r, i) * sample_grads(r, i);
    const double inv_n = 1.0 / static_cast<double>(sample_grads.rows());
    for (auto& v : block.diag)
      v *= inv_n;
  }
  return block;
}

BnFisherBlock compute_bn_block(const Layer& layer, BnFimMode mode) {
  return bn_block_from_sample_grads(bn_sample_grads(layer), mode);
}

std::vector<double> precondition_bn(const BnFisherBlock& block, std::span<const double> grad,
                                    double gamma_bn) {
  if (!(gamma_bn > 0.0))
    throw FimError("precondition_bn: gamma_bn must be positive");
  if (grad.size() != block.dim()) {
    std::ostringstream oss;
    oss << "precondition_bn: gradient has " << grad.size() << " entries, block dim is "
        << block.dim();
    throw FimError(oss.str());
  }
  std::vector<double> out(grad.size());
  if (block.mode == BnFimMode::diagonal) {
    for (std::size_t i = 0; i < grad.size(); ++i)
      out[i] = grad[i] / (block.diag[i] + gamma_bn);
    return out;
  }
  const DenseMatrix inv = invert_spd(add_diagonal(block.full, gamma_bn));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < grad.size(); ++j)
      s += inv(i, j) * grad[j];
    out[i] = s;
  }
  return out;
}

FimMemoryReport fim_memory_report(const std::vector<LayerSpec>& layers, std::size_t bytes_per_real) {
  FimMemoryReport report;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    FimMemoryRow full{i, s.kind, 0, 0, 0, BnFimMode::full};
    FimMemoryRow diag{i, s.kind, 0, 0, 0, BnFimMode::diagonal};
    if (s.kind == LayerKind::batch_norm) {
      const std::size_t d = 2 * s.in_dims.channels;
      full.f_bn_bytes = d * d * bytes_per_real;
      diag.f_bn_bytes = d * bytes_per_real;
    } else {
      full.a_bytes = diag.a_bytes = s.a_dim() * s.a_dim() * bytes_per_real;
      full.g_bytes = diag.g_bytes = s.g_dim() * s.g_dim() * bytes_per_real;
    }
    report.total_full += full.total();
    report.total_diagonal += diag.total();
    report.full.push_back(full);
    report.diagonal.push_back(diag);
  }
  return report;
}

void write_fim_memory_csv(std::ostream& os, const FimMemoryReport& report) {
  os << "layer_index,layer_kind,a_bytes,g_bytes,f_bn_bytes,mode\n";
  for (const auto* rows : {&report.full, &report.diagonal})
    for (const auto& r : *rows)
      os << r.layer_index << ',' << to_string(r.kind) << ',' << r.a_bytes << ',' << r.g_bytes << ','
         << r.f_bn_bytes << ',' << to_string(r.mode) << '\n';
}

} // namespace dkfac
