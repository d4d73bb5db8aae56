// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sml/tensor.hpp"

namespace sml {

/// Named, insertion-ordered collection of tensors. Holds model parameters,
/// their gradients, and snapshots of either.
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor tensor);
  // Replaces the tensor under an existing name, keeping its position.
  void set(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t total_numel() const;
  std::vector<std::string> names() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  /// Same names in the same order with the same shapes.
  bool congruent(const ParamStore& other) const;

  /// Deep copy of every value; the copy keeps requires_grad flags but no gradients.
  ParamStore snapshot() const;
  /// Writes snapshot values back into the existing tensors (handles unchanged).
  void restore(const ParamStore& snapshot);

  /// Gradient buffers as a store of plain tensors (zeros where none recorded).
  ParamStore gradients() const;
  void zero_grad();
  void clear_grad();
  void set_requires_grad(bool value);

  std::vector<Real> flatten() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// p <- p - lr * g for every entry.
void sgd_step(ParamStore& params, const ParamStore& grads, Real lr);

/// Rescales every entry when the global L2 norm exceeds max_norm; returns the
/// norm measured before clipping.
Real clip_grad_norm(ParamStore& grads, Real max_norm);

Real global_norm(const ParamStore& grads);

/// Checkpoint file: a text manifest (name, shape, dtype per entry, plus free
/// attributes) followed by raw little-endian row-major values.
struct Checkpoint {
  ParamStore params;
  std::map<std::string, std::string> attributes;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sml
