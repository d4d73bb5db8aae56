// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sml/tensor.hpp"

namespace sml {

using Rng = std::mt19937_64;

/// Differentiable primitives. Each records a node on the active graph when
/// any input requires grad; otherwise it is a plain computation.
///
/// Binary elementwise ops broadcast over matrix views: an operand may match
/// the output shape, or be a [1 x n] row, an [m x 1] column, or a scalar.
namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
// factor * x + shift
Tensor affine(const Tensor& x, Real factor, Real shift);

Tensor concat(std::span<const Tensor> parts);       // along the last axis
Tensor concat_rows(std::span<const Tensor> parts);  // along the first axis
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softmax(const Tensor& x);      // last axis, max-shifted
Tensor log_softmax(const Tensor& x);  // last axis, max-shifted

// Rows of table selected by ids -> [ids.size() x table.cols()].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

Tensor sum(const Tensor& x);
Tensor row_sum(const Tensor& x);

// Per-example attention over a block-stacked memory. memory is
// [batch * steps x dim] with example b occupying rows [b*steps, (b+1)*steps).
Tensor block_scores(const Tensor& query, const Tensor& memory, std::size_t steps);
Tensor block_context(const Tensor& weights, const Tensor& memory);
// Stacks per-step [batch x dim] tensors into the block layout above.
Tensor interleave_steps(std::span<const Tensor> steps);

/// Mean negative log-likelihood of targets over positions with mask != 0.
Tensor cross_entropy(const Tensor& log_probs, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

/// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, Real p, bool training, Rng& rng);

}  // namespace ops

enum class Primitive {
  matmul,
  add,
  sub,
  mul,
  scale,
  concat,
  slice,
  tanh,
  sigmoid,
  exp,
  log,
  softmax,
  log_softmax,
  embedding,
  sum,
};

struct PrimitiveArgs {
  Real scalar = 1;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::int32_t> ids;
};

Primitive parse_primitive(std::string_view name);
std::string_view primitive_name(Primitive kind);

/// Uniform entry point over the primitive set.
Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveArgs& args = {});

}  // namespace sml
