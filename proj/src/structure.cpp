// SPDX-License-Identifier: Apache-2.0
#include "sml/structure.hpp"

#include <cmath>
#include <limits>

namespace sml::structure {

std::size_t gated_size(const ParamStore& params, std::span<const std::string> names) {
  std::size_t n = 0;
  for (const auto& name : names) n += params.at(name).numel();
  return n;
}

namespace {
Tensor uniform(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> unif(-0.1, 0.1);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(unif(rng));
  return Tensor(std::move(shape), std::move(v), true);
}
}  // namespace

void init_gates(ParamStore& params, const model::HyperParams& hp, Rng& rng) {
  const auto names = model::decoder_parameter_names(hp);
  const std::size_t d = gated_size(params, names);
  params.add(kFuse, uniform({2 * hp.sf_dim, hp.sf_dim}, rng));
  params.add(kGate, uniform({2 * hp.sf_dim, hp.sf_dim}, rng));
  params.add(kParam, uniform({hp.sf_dim, d}, rng));
  if (hp.gate_bias != 0) params.add(kParamBias, Tensor::filled({1, d}, hp.gate_bias, true));
}

bool has_gates(const ParamStore& params) {
  return params.contains(kFuse) && params.contains(kGate) && params.contains(kParam);
}

std::size_t TaskEmbeddingTable::rows() const {
  return (frozen.defined() ? frozen.rows() : 0) + (trainable.defined() ? trainable.rows() : 0);
}

Tensor TaskEmbeddingTable::matrix() const {
  if (!frozen.defined()) return trainable;
  if (!trainable.defined()) return frozen;
  const Tensor parts[] = {frozen, trainable};
  return ops::concat_rows(parts);
}

TaskEmbeddingTable extend_for_adaptation(const Tensor& table, Rng& rng) {
  TaskEmbeddingTable out;
  out.frozen = table.detach();
  out.trainable = uniform({1, table.cols()}, rng);
  return out;
}

TaskRepresentation task_representation(const Tensor& table, const Tensor& w_fuse, const Tensor& w_gate,
                                       std::size_t k) {
  if (table.rank() != 2) throw ShapeError("task_representation: table must be a matrix, got " + shape_string(table.shape()));
  const std::size_t K = table.rows(), d = table.cols();
  if (k >= K) {
    throw std::out_of_range("task_representation: task index " + std::to_string(k) + " out of range for " +
                            std::to_string(K) + " rows");
  }
  if (w_fuse.rows() != 2 * d || w_fuse.cols() != d || w_gate.rows() != 2 * d || w_gate.cols() != d) {
    throw ShapeError("task_representation: gate weights must be [" + std::to_string(2 * d) + " x " +
                     std::to_string(d) + "], got " + shape_string(w_fuse.shape()) + " and " +
                     shape_string(w_gate.shape()));
  }
  TaskRepresentation r;
  Tensor s = ops::slice_rows(table, k, k + 1);
  r.attention = ops::softmax(ops::matmul(s, ops::transpose(table)));
  r.mixed = ops::matmul(r.attention, table);
  const Tensor sm[] = {s, r.mixed};
  Tensor joint = ops::concat(sm);
  r.fused = ops::tanh(ops::matmul(joint, w_fuse));
  r.gate = ops::sigmoid(ops::matmul(joint, w_gate));
  r.refined = ops::add(s, ops::mul(r.gate, ops::sub(r.fused, s)));
  return r;
}

std::vector<std::vector<Real>> attention_matrix(const Tensor& table) {
  const std::size_t K = table.rows(), d = table.cols();
  auto t = table.data();
  std::vector<std::vector<Real>> out(K, std::vector<Real>(K));
  for (std::size_t k = 0; k < K; ++k) {
    Real mx = -std::numeric_limits<Real>::infinity();
    auto& row = out[k];
    for (std::size_t j = 0; j < K; ++j) {
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += t[k * d + c] * t[j * d + c];
      row[j] = s;
      mx = std::max(mx, s);
    }
    Real z = 0;
    for (auto& v : row) z += v = std::exp(v - mx);
    for (auto& v : row) v /= z;
  }
  return out;
}

Tensor gate_values(const Tensor& w_param, const Tensor& refined, const Tensor& bias) {
  if (refined.numel() != w_param.rows()) {
    throw ShapeError("parameter_gate: refined representation has " + std::to_string(refined.numel()) +
                     " values but W_p expects " + std::to_string(w_param.rows()));
  }
  Tensor z = ops::matmul(ops::reshape(refined, {1, refined.numel()}), w_param);
  if (bias.defined()) {
    if (bias.numel() != w_param.cols()) {
      throw ShapeError("parameter_gate: bias has " + std::to_string(bias.numel()) + " values, expected " +
                       std::to_string(w_param.cols()));
    }
    z = ops::add(z, bias);
  }
  return ops::sigmoid(z);
}

ParamStore parameter_gate(const ParamStore& params, std::span<const std::string> gated, const Tensor& w_param,
                          const Tensor& refined, const Tensor& bias) {
  const std::size_t d = gated_size(params, gated);
  if (w_param.cols() != d) {
    throw ShapeError("parameter_gate: W_p produces " + std::to_string(w_param.cols()) +
                     " gate values but the gated parameter set has " + std::to_string(d));
  }
  Tensor o = gate_values(w_param, refined, bias);
  ParamStore out;
  for (const auto& [name, tensor] : params) out.add(name, tensor);
  std::size_t offset = 0;
  for (const auto& name : gated) {
    const Tensor& p = params.at(name);
    Tensor slice = ops::reshape(ops::slice_cols(o, offset, offset + p.numel()), p.shape());
    out.set(name, ops::mul(p, slice));
    offset += p.numel();
  }
  return out;
}

}  // namespace sml::structure
