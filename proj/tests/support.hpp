// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sml/graph.hpp"
#include "sml/ops.hpp"
#include "sml/param_store.hpp"

namespace sml::test {

inline Tensor uniform(Shape shape, Real lo, Real hi, Rng& rng, bool requires_grad = false) {
  std::uniform_real_distribution<Real> dist(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// ||a - b|| / max(||a|| + ||b||, tiny)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-12);
}

struct GradCheck {
  double rel_error = 0;
  std::vector<double> analytic, numeric;
};

/// Analytic gradient of a scalar function of `leaves` against central
/// differences. The leaves are perturbed in place and restored.
inline GradCheck check_gradients(const std::vector<Tensor>& leaves, const std::function<Tensor()>& f,
                                  double h = 1e-5) {
  GradCheck out;
  for (const auto& t : leaves) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Graph g;
    GraphScope scope(g);
    Tensor loss = f();
    g.backward(loss);
  }
  for (const auto& t : leaves)
    for (std::size_t i = 0; i < t.numel(); ++i) out.analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
  NoGradScope no_grad;
  for (const auto& t : leaves) {
    auto d = t.data_mut();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Real keep = d[i];
      d[i] = static_cast<Real>(keep + h);
      const double up = f().item();
      d[i] = static_cast<Real>(keep - h);
      const double down = f().item();
      d[i] = keep;
      out.numeric.push_back((up - down) / (2 * h));
    }
  }
  out.rel_error = relative_error(out.analytic, out.numeric);
  return out;
}

/// Fixed weighted sum so that every output element gets a distinct upstream gradient.
inline Tensor probe(const Tensor& y, Rng& rng) {
  Tensor w = uniform(y.shape(), -1, 1, rng);
  return ops::sum(ops::mul(y, w));
}

inline double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace sml::test
