// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sml {

#ifdef SML_SINGLE_PRECISION
using Real = float;
inline constexpr const char* kRealName = "f32";
#else
using Real = double;
inline constexpr const char* kRealName = "f64";
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor with an optional gradient buffer.
///
/// A Tensor is a handle: copies share the same storage, which is what lets the
/// tape accumulate gradients into parameters owned elsewhere. Use clone() for
/// an independent copy. Mutators are const for the same reason.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor row(std::vector<Real> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const { return shape().size(); }
  // Matrix view: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const;
  std::span<Real> data_mut() const;
  Real item() const;
  Real at(std::size_t i) const { return data()[i]; }
  Real at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool value) const;

  bool has_grad() const;
  std::span<const Real> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<Real> grad_mut() const;
  void zero_grad() const;
  // Drops the gradient buffer entirely.
  void clear_grad() const;

  // Marks the tensor as produced by a recorded operation.
  bool is_leaf() const;
  void mark_non_leaf() const;

  Tensor clone() const;
  Tensor detach() const;
  // Copies values from other (same shape) into this storage.
  void assign(const Tensor& other) const;

  const void* id() const { return impl_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Storage> impl_;

  Storage& storage() const;
};

}  // namespace sml
