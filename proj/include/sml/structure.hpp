// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "sml/model.hpp"
#include "sml/ops.hpp"
#include "sml/param_store.hpp"

/// Task representations from gated self-attention over the condition
/// embedding table, and the parameter gate that rescales the decoder
/// initialization per task.
namespace sml::structure {

inline const std::string kFuse = "gate.W_f";   // [2*sf_dim x sf_dim]
inline const std::string kGate = "gate.W_g";   // [2*sf_dim x sf_dim]
inline const std::string kParam = "gate.W_p";  // [sf_dim x D_dec]
inline const std::string kParamBias = "gate.b_p";  // [1 x D_dec]

/// Total number of values in the named entries.
std::size_t gated_size(const ParamStore& params, std::span<const std::string> names);

/// Adds W_f, W_g, W_p ~ U(-0.1, 0.1) to a model store, plus b_p filled with
/// hp.gate_bias when it is nonzero.
void init_gates(ParamStore& params, const model::HyperParams& hp, Rng& rng);
bool has_gates(const ParamStore& params);

/// Condition table used during adaptation: the meta-trained rows are held
/// fixed and only the appended rows receive gradients.
struct TaskEmbeddingTable {
  Tensor frozen;     // [K x sf_dim], never requires grad; may be undefined
  Tensor trainable;  // [R x sf_dim]; may be undefined

  std::size_t rows() const;
  Tensor matrix() const;
};

/// Copies the table as frozen rows and appends one trainable row drawn from
/// U(-0.1, 0.1). The new row's index is `result.rows() - 1`.
TaskEmbeddingTable extend_for_adaptation(const Tensor& table, Rng& rng);

struct TaskRepresentation {
  Tensor attention;  // [1 x K]
  Tensor mixed;      // [1 x sf_dim], attention-weighted sum of rows
  Tensor fused;      // tanh([s; m] W_f)
  Tensor gate;       // sigmoid([s; m] W_g)
  Tensor refined;    // g * f + (1 - g) * s
};

TaskRepresentation task_representation(const Tensor& table, const Tensor& w_fuse, const Tensor& w_gate,
                                       std::size_t k);

/// Row k holds the self-attention distribution of task k over all rows.
std::vector<std::vector<Real>> attention_matrix(const Tensor& table);

/// o = sigmoid(s_refined W_p + b_p), one value per gated parameter. The bias
/// may be undefined.
Tensor gate_values(const Tensor& w_param, const Tensor& refined, const Tensor& bias = {});

/// Returns a store congruent with params where each named entry is multiplied
/// by its slice of o. Other entries are the same tensor handles.
ParamStore parameter_gate(const ParamStore& params, std::span<const std::string> gated, const Tensor& w_param,
                          const Tensor& refined, const Tensor& bias = {});

}  // namespace sml::structure
