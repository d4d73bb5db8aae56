// SPDX-License-Identifier: Apache-2.0
#include "sml/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

namespace sml {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad)
    : impl_(std::make_shared<Storage>()) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), Real{0}, requires_grad);
}

Tensor Tensor::filled(Shape shape, Real value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::row(std::vector<Real> values, bool requires_grad) {
  Shape s{1, values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

Tensor::Storage& Tensor::storage() const {
  if (!impl_) throw std::logic_error("access to undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return storage().shape; }
std::size_t Tensor::numel() const { return storage().data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  return shape_numel(s) / s.back();
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const Real> Tensor::data() const { return storage().data; }
std::span<Real> Tensor::data_mut() const { return storage().data; }

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_string(shape()));
  return storage().data[0];
}

bool Tensor::requires_grad() const { return storage().requires_grad; }
void Tensor::set_requires_grad(bool value) const { storage().requires_grad = value; }

bool Tensor::has_grad() const { return !storage().grad.empty(); }
std::span<const Real> Tensor::grad() const { return storage().grad; }

std::span<Real> Tensor::grad_mut() const {
  auto& s = storage();
  if (s.grad.empty()) s.grad.assign(s.data.size(), Real{0});
  return s.grad;
}

void Tensor::zero_grad() const {
  auto& g = storage().grad;
  std::fill(g.begin(), g.end(), Real{0});
}

void Tensor::clear_grad() const {
  storage().grad.clear();
  storage().grad.shrink_to_fit();
}

bool Tensor::is_leaf() const { return storage().leaf; }
void Tensor::mark_non_leaf() const { storage().leaf = false; }

Tensor Tensor::clone() const {
  Tensor out(shape(), storage().data, requires_grad());
  return out;
}

Tensor Tensor::detach() const { return Tensor(shape(), storage().data, false); }

void Tensor::assign(const Tensor& other) const {
  if (other.shape() != shape()) {
    throw ShapeError("assign: shape " + shape_string(other.shape()) + " into " + shape_string(shape()));
  }
  auto src = other.data();
  std::copy(src.begin(), src.end(), storage().data.begin());
}

}  // namespace sml
