// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace dkfac {

std::string to_string(LayerKind kind) {
  switch (kind) {
  case LayerKind::fully_connected:
    return "fc";
  case LayerKind::conv2d:
    return "conv";
  case LayerKind::batch_norm:
    return "bn";
  }
  return "unknown";
}

std::size_t LayerSpec::fan_in() const {
  switch (kind) {
  case LayerKind::fully_connected:
    return in_dims.count();
  case LayerKind::conv2d:
    return in_dims.channels * kernel_h * kernel_w;
  case LayerKind::batch_norm:
    return 0;
  }
  return 0;
}

std::size_t LayerSpec::a_dim() const { return fan_in() + (has_bias ? 1 : 0); }

std::size_t LayerSpec::g_dim() const {
  return kind == LayerKind::fully_connected ? out_dims.count() : out_dims.channels;
}

std::size_t LayerSpec::parameter_count() const {
  if (kind == LayerKind::batch_norm)
    return 2 * in_dims.channels;
  return g_dim() * a_dim();
}

void LayerSpec::validate() const {
  std::ostringstream err;
  if (in_dims.count() == 0 || out_dims.count() == 0)
    err << "layer dimensions must be positive; ";
  if (kind == LayerKind::conv2d) {
    if (kernel_h == 0 || kernel_w == 0)
      err << "conv kernel must be positive in each dimension; ";
    if (stride == 0)
      err << "conv stride must be positive; ";
    if (kernel_h > in_dims.height + 2 * padding || kernel_w > in_dims.width + 2 * padding)
      err << "conv kernel larger than padded input; ";
  }
  if (kind == LayerKind::batch_norm && !(in_dims == out_dims))
    err << "batch_norm requires in_dims == out_dims; ";
  const auto msg = err.str();
  if (!msg.empty())
    throw ModelError("invalid " + to_string(kind) + " layer: " + msg.substr(0, msg.size() - 2));
}

LayerSpec fully_connected_spec(Shape3 in, std::size_t out_features, bool bias, bool relu) {
  LayerSpec s;
  s.kind = LayerKind::fully_connected;
  s.in_dims = in;
  s.out_dims = {out_features, 1, 1};
  s.has_bias = bias;
  s.relu = relu;
  return s;
}

LayerSpec conv2d_spec(Shape3 in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                      std::size_t padding, bool bias, bool relu) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_dims = in;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.stride = stride;
  s.padding = padding;
  s.has_bias = bias;
  s.relu = relu;
  std::size_t oh = 0;
  std::size_t ow = 0;
  if (stride > 0 && in.height + 2 * padding >= kernel && in.width + 2 * padding >= kernel) {
    oh = (in.height + 2 * padding - kernel) / stride + 1;
    ow = (in.width + 2 * padding - kernel) / stride + 1;
  }
  s.out_dims = {out_channels, oh, ow};
  return s;
}

LayerSpec batch_norm_spec(Shape3 in, bool relu) {
  LayerSpec s;
  s.kind = LayerKind::batch_norm;
  s.in_dims = in;
  s.out_dims = in;
  s.has_bias = false;
  s.relu = relu;
  return s;
}

LayerRecord init_weights(const LayerSpec& spec, std::uint64_t seed) {
  spec.validate();
  LayerRecord r;
  if (spec.kind == LayerKind::batch_norm) {
    const std::size_t c = spec.in_dims.channels;
    r.weights = Tensor({2, c});
    std::fill_n(r.weights.storage().begin(), c, 1.0);
  } else {
    const std::size_t rows = spec.g_dim();
    const std::size_t cols = spec.a_dim();
    r.weights = Tensor({rows, cols});
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                      static_cast<std::uint32_t>(seed >> 32), 0x6b666163u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(spec.fan_in())));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < spec.fan_in(); ++j)
        r.weights[i * cols + j] = normal(rng);
  }
  r.weight_grad = Tensor(r.weights.shape());
  r.velocity = Tensor(r.weights.shape());
  return r;
}

Network build_network(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  Network net;
  net.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i > 0 && !(specs[i].in_dims == specs[i - 1].out_dims)) {
      std::ostringstream oss;
      oss << "layer " << i << " input shape does not match layer " << i - 1 << " output";
      throw ModelError(oss.str());
    }
    Layer layer;
    layer.spec = specs[i];
    layer.record = init_weights(specs[i], seed * 1000003u + i);
    if (specs[i].kind == LayerKind::batch_norm) {
      layer.running.mean.assign(specs[i].in_dims.channels, 0.0);
      layer.running.var.assign(specs[i].in_dims.channels, 1.0);
    }
    net.push_back(std::move(layer));
  }
  return net;
}

DenseMatrix weight_matrix(const Tensor& t) {
  if (t.rank() != 2)
    throw ModelError("weight_matrix: tensor is not two-dimensional");
  return DenseMatrix(t.dim(0), t.dim(1), t.storage());
}

namespace {

void check_input(const Layer& layer, std::size_t index, const Tensor& x) {
  const auto& in = layer.spec.in_dims;
  if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width) {
    std::ostringstream oss;
    oss << "layer " << index << " (" << to_string(layer.spec.kind) << "): input shape mismatch, expected ("
        << in.channels << "," << in.height << "," << in.width << ")";
    throw ModelError(oss.str());
  }
}

// One im2col row for sample data `x` (C*H*W) at output position (oy, ox).
void im2col_row(const LayerSpec& s, std::span<const double> x, std::size_t oy, std::size_t ox,
                std::span<double> row) {
  const auto& in = s.in_dims;
  std::size_t k = 0;
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
      const auto y = static_cast<std::ptrdiff_t>(oy * s.stride + ki) - static_cast<std::ptrdiff_t>(s.padding);
      for (std::size_t kj = 0; kj < s.kernel_w; ++kj, ++k) {
        const auto xx = static_cast<std::ptrdiff_t>(ox * s.stride + kj) - static_cast<std::ptrdiff_t>(s.padding);
        if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(in.height) ||
            xx >= static_cast<std::ptrdiff_t>(in.width))
          row[k] = 0.0;
        else
          row[k] = x[(c * in.height + static_cast<std::size_t>(y)) * in.width + static_cast<std::size_t>(xx)];
      }
    }
  }
  if (s.has_bias)
    row[k] = 1.0;
}

void col2im_add(const LayerSpec& s, std::span<const double> row, std::size_t oy, std::size_t ox,
                std::span<double> dx) {
  const auto& in = s.in_dims;
  std::size_t k = 0;
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
      const auto y = static_cast<std::ptrdiff_t>(oy * s.stride + ki) - static_cast<std::ptrdiff_t>(s.padding);
      for (std::size_t kj = 0; kj < s.kernel_w; ++kj, ++k) {
        const auto xx = static_cast<std::ptrdiff_t>(ox * s.stride + kj) - static_cast<std::ptrdiff_t>(s.padding);
        if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(in.height) ||
            xx >= static_cast<std::ptrdiff_t>(in.width))
          continue;
        dx[(c * in.height + static_cast<std::size_t>(y)) * in.width + static_cast<std::size_t>(xx)] += row[k];
      }
    }
  }
}

// Linear part shared by FC and conv: rows of `a` times W^T into output layout
// {M, C_out, positions}.
Tensor linear_forward(const LayerSpec& s, const Tensor& weights, const Tensor& a, std::size_t m) {
  const std::size_t out = s.g_dim();
  const std::size_t ad = s.a_dim();
  const std::size_t pos = s.positions();
  Tensor y({m, s.out_dims.channels, s.out_dims.height, s.out_dims.width});
  for (std::size_t n = 0; n < m; ++n) {
    for (std::size_t t = 0; t < pos; ++t) {
      const double* arow = a.storage().data() + (n * pos + t) * ad;
      for (std::size_t o = 0; o < out; ++o) {
        const double* w = weights.storage().data() + o * ad;
        double acc = 0.0;
        for (std::size_t k = 0; k < ad; ++k)
          acc += w[k] * arow[k];
        y[(n * out + o) * pos + t] = acc;
      }
    }
  }
  return y;
}

Tensor build_rows(const LayerSpec& s, const Tensor& x) {
  const std::size_t m = x.dim(0);
  const std::size_t pos = s.positions();
  const std::size_t ad = s.a_dim();
  Tensor rows({m * pos, ad});
  for (std::size_t n = 0; n < m; ++n) {
    auto xs = x.slice(n);
    if (s.kind == LayerKind::fully_connected) {
      auto r = rows.slice(n);
      std::copy(xs.begin(), xs.end(), r.begin());
      if (s.has_bias)
        r[s.fan_in()] = 1.0;
    } else {
      for (std::size_t oy = 0; oy < s.out_dims.height; ++oy)
        for (std::size_t ox = 0; ox < s.out_dims.width; ++ox)
          im2col_row(s, xs, oy, ox, rows.slice(n * pos + oy * s.out_dims.width + ox));
    }
  }
  return rows;
}

struct BnMoments {
  std::vector<double> mean;
  std::vector<double> var; // biased
};

BnMoments bn_moments(const Tensor& x) {
  const std::size_t m = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(m * hw);
  BnMoments mo{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t n = 0; n < m; ++n)
      for (std::size_t k = 0; k < hw; ++k)
        s += x[(n * c + ch) * hw + k];
    const double mu = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < m; ++n)
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = x[(n * c + ch) * hw + k] - mu;
        v += d * d;
      }
    mo.mean[ch] = mu;
    mo.var[ch] = v / count;
  }
  return mo;
}

void apply_relu(Tensor& y) {
  for (auto& v : y.storage())
    v = v > 0.0 ? v : 0.0;
}

void check_labels(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() < 2 || labels.rank() != 2 || logits.dim(0) != labels.dim(0) ||
      logits.stride0() != labels.dim(1))
    throw ModelError("labels shape does not match logits");
  if (logits.dim(0) == 0)
    throw ModelError("empty batch");
}

} // namespace

double softmax_cross_entropy(const Tensor& logits, const Tensor& labels) {
  check_labels(logits, labels);
  const std::size_t m = logits.dim(0);
  const std::size_t c = labels.dim(1);
  double total = 0.0;
  for (std::size_t n = 0; n < m; ++n) {
    auto z = logits.slice(n);
    const double zmax = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k)
      s += std::exp(z[k] - zmax);
    const double lse = zmax + std::log(s);
    for (std::size_t k = 0; k < c; ++k) {
      const double y = labels[n * c + k];
      if (y != 0.0)
        total += y * (lse - z[k]);
    }
  }
  return total / static_cast<double>(m);
}

ForwardResult forward(Network& net, const Batch& batch) {
  if (net.empty())
    throw ModelError("forward: empty network");
  const std::size_t m = batch.size();
  if (m == 0)
    throw ModelError("forward: empty batch");
  Tensor x = batch.inputs;
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& layer = net[i];
    const LayerSpec& s = layer.spec;
    check_input(layer, i, x);
    Tensor y;
    if (s.kind == LayerKind::batch_norm) {
      const std::size_t c = s.in_dims.channels;
      const std::size_t hw = s.in_dims.height * s.in_dims.width;
      const auto mo = bn_moments(x);
      layer.inv_std.resize(c);
      Tensor xhat(x.shape());
      y = Tensor(x.shape());
      const double count = static_cast<double>(m * hw);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(mo.var[ch] + kBnEpsilon);
        layer.inv_std[ch] = inv;
        const double scale = layer.record.weights[ch];
        const double shift = layer.record.weights[c + ch];
        for (std::size_t n = 0; n < m; ++n)
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = (n * c + ch) * hw + k;
            xhat[idx] = (x[idx] - mo.mean[ch]) * inv;
            y[idx] = scale * xhat[idx] + shift;
          }
        const double unbiased = count > 1.0 ? mo.var[ch] * count / (count - 1.0) : mo.var[ch];
        layer.running.mean[ch] =
            kBnRunningMomentum * layer.running.mean[ch] + (1.0 - kBnRunningMomentum) * mo.mean[ch];
        layer.running.var[ch] =
            kBnRunningMomentum * layer.running.var[ch] + (1.0 - kBnRunningMomentum) * unbiased;
      }
      xhat.reshape({m, s.in_dims.count()});
      layer.record.captured_input = std::move(xhat);
    } else {
      layer.record.captured_input = build_rows(s, x);
      y = linear_forward(s, layer.record.weights, layer.record.captured_input, m);
    }
    layer.record.captured_output_grad.clear();
    if (s.relu) {
      layer.pre_activation = y;
      apply_relu(y);
    } else {
      layer.pre_activation.clear();
    }
    layer.has_forward = true;
    x = std::move(y);
  }
  x.reshape({m, x.stride0()});
  ForwardResult out;
  out.loss = softmax_cross_entropy(x, batch.labels);
  out.logits = std::move(x);
  return out;
}

void backward(Network& net, const Tensor& logits, const Tensor& labels) {
  for (std::size_t i = 0; i < net.size(); ++i)
    if (!net[i].has_forward) {
      std::ostringstream oss;
      oss << "backward: layer " << i << " has no preceding forward pass";
      throw ModelError(oss.str());
    }
  check_labels(logits, labels);
  const std::size_t m = logits.dim(0);
  const std::size_t classes = labels.dim(1);
  const double inv_m = 1.0 / static_cast<double>(m);
  const double batch = static_cast<double>(m);

  // dL/dz = (softmax - y) / M
  Tensor dy({m, classes});
  for (std::size_t n = 0; n < m; ++n) {
    auto z = logits.slice(n);
    const double zmax = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t k = 0; k < classes; ++k)
      s += std::exp(z[k] - zmax);
    for (std::size_t k = 0; k < classes; ++k)
      dy[n * classes + k] = (std::exp(z[k] - zmax) / s - labels[n * classes + k]) * inv_m;
  }

  for (std::size_t ii = net.size(); ii-- > 0;) {
    Layer& layer = net[ii];
    const LayerSpec& s = layer.spec;
    auto& rec = layer.record;
    dy.reshape({m, s.out_dims.channels, s.out_dims.height, s.out_dims.width});
    if (s.relu) {
      for (std::size_t k = 0; k < dy.size(); ++k)
        if (!(layer.pre_activation[k] > 0.0))
          dy[k] = 0.0;
    }
    const bool need_dx = ii > 0;
    Tensor dx;
    if (s.kind == LayerKind::batch_norm) {
      const std::size_t c = s.in_dims.channels;
      const std::size_t hw = s.in_dims.height * s.in_dims.width;
      const double count = static_cast<double>(m * hw);
      const Tensor& xhat = rec.captured_input;
      rec.weight_grad.fill(0.0);
      if (need_dx)
        dx = Tensor(dy.shape());
      for (std::size_t ch = 0; ch < c; ++ch) {
        double dscale = 0.0;
        double dshift = 0.0;
        for (std::size_t n = 0; n < m; ++n)
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = (n * c + ch) * hw + k;
            dscale += dy[idx] * xhat[idx];
            dshift += dy[idx];
          }
        rec.weight_grad[ch] = dscale;
        rec.weight_grad[c + ch] = dshift;
        if (need_dx) {
          // dx = scale * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
          const double scale = rec.weights[ch];
          const double coef = scale * layer.inv_std[ch] / count;
          for (std::size_t n = 0; n < m; ++n)
            for (std::size_t k = 0; k < hw; ++k) {
              const std::size_t idx = (n * c + ch) * hw + k;
              dx[idx] = coef * (count * dy[idx] - dshift - xhat[idx] * dscale);
            }
        }
      }
      Tensor g({m, s.in_dims.count()}, dy.storage());
      for (auto& v : g.storage())
        v *= batch;
      rec.captured_output_grad = std::move(g);
    } else {
      const std::size_t out = s.g_dim();
      const std::size_t ad = s.a_dim();
      const std::size_t fan = s.fan_in();
      const std::size_t pos = s.positions();
      const Tensor& a = rec.captured_input;
      Tensor g({m * pos, out});
      rec.weight_grad.fill(0.0);
      if (need_dx)
        dx = Tensor({m, s.in_dims.channels, s.in_dims.height, s.in_dims.width});
      std::vector<double> drow(fan);
      for (std::size_t n = 0; n < m; ++n) {
        for (std::size_t t = 0; t < pos; ++t) {
          const std::size_t r = n * pos + t;
          const double* arow = a.storage().data() + r * ad;
          std::fill(drow.begin(), drow.end(), 0.0);
          for (std::size_t o = 0; o < out; ++o) {
            const double d = dy[(n * out + o) * pos + t];
            g[r * out + o] = d * batch;
            if (d == 0.0)
              continue;
            double* wg = rec.weight_grad.storage().data() + o * ad;
            for (std::size_t k = 0; k < ad; ++k)
              wg[k] += d * arow[k];
            if (need_dx) {
              const double* w = rec.weights.storage().data() + o * ad;
              for (std::size_t k = 0; k < fan; ++k)
                drow[k] += d * w[k];
            }
          }
          if (need_dx) {
            if (s.kind == LayerKind::fully_connected) {
              auto dxs = dx.slice(n);
              std::copy(drow.begin(), drow.end(), dxs.begin());
            } else {
              col2im_add(s, drow, t / s.out_dims.width, t % s.out_dims.width, dx.slice(n));
            }
          }
        }
      }
      rec.captured_output_grad = std::move(g);
    }
    layer.has_forward = false;
    dy = std::move(dx);
  }
}

Tensor predict(const Network& net, const Tensor& inputs) {
  if (net.empty())
    throw ModelError("predict: empty network");
  const std::size_t m = inputs.dim(0);
  Tensor x = inputs;
  for (std::size_t i = 0; i < net.size(); ++i) {
    const Layer& layer = net[i];
    const LayerSpec& s = layer.spec;
    check_input(layer, i, x);
    Tensor y;
    if (s.kind == LayerKind::batch_norm) {
      const std::size_t c = s.in_dims.channels;
      const std::size_t hw = s.in_dims.height * s.in_dims.width;
      y = Tensor(x.shape());
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(layer.running.var[ch] + kBnEpsilon);
        const double scale = layer.record.weights[ch];
        const double shift = layer.record.weights[c + ch];
        for (std::size_t n = 0; n < m; ++n)
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t idx = (n * c + ch) * hw + k;
            y[idx] = scale * (x[idx] - layer.running.mean[ch]) * inv + shift;
          }
      }
    } else {
      y = linear_forward(s, layer.record.weights, build_rows(s, x), m);
    }
    if (s.relu)
      apply_relu(y);
    x = std::move(y);
  }
  x.reshape({m, x.stride0()});
  return x;
}

void apply_update(LayerRecord& layer, const Tensor& precond_grad, double eta, double m) {
  if (precond_grad.size() != layer.weights.size() || layer.velocity.size() != layer.weights.size())
    throw ModelError("apply_update: shape mismatch");
  std::vector<double> velocity(layer.velocity.size());
  for (std::size_t k = 0; k < velocity.size(); ++k) {
    velocity[k] = -eta * precond_grad[k] + m * layer.velocity[k];
    if (!std::isfinite(velocity[k]) || !std::isfinite(layer.weights[k] + velocity[k])) {
      std::ostringstream oss;
      oss << "non-finite update at parameter " << k << " (grad=" << precond_grad[k]
          << ", eta=" << eta << ", m=" << m << ")";
      throw DivergenceError(oss.str());
    }
  }
  for (std::size_t k = 0; k < velocity.size(); ++k) {
    layer.velocity[k] = velocity[k];
    layer.weights[k] += velocity[k];
  }
}

} // namespace dkfac
