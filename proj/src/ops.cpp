// SPDX-License-Identifier: Apache-2.0
#include "sml/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "sml/graph.hpp"
#include "sml/kernels.hpp"

namespace sml {
namespace {

[[noreturn]] void shape_fail(std::string_view kind, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_graph()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool tracking(std::span<const Tensor> inputs) {
  if (!active_graph()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

template <class F>
void record(const char* kind, std::vector<Tensor> inputs, Tensor& out, F&& rule) {
  out.set_requires_grad(true);
  active_graph()->record(Graph::Node{kind, std::move(inputs), out, std::forward<F>(rule)});
}

Tensor make(Shape shape) { return Tensor::zeros(std::move(shape)); }

// Output shape of a broadcasting binary op.
Shape broadcast_shape(std::string_view kind, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const std::size_t r = std::max(ar, br), c = std::max(ac, bc);
  auto ok = [&](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
  if (!ok(ar, br) || !ok(ac, bc)) shape_fail(kind, a, b);
  if (a.numel() == r * c) return a.shape();
  if (b.numel() == r * c) return b.shape();
  return {r, c};
}

struct Bcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  std::size_t ia(std::size_t i, std::size_t j) const { return (ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j); }
  std::size_t ib(std::size_t i, std::size_t j) const { return (br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j); }
};

template <class Fwd, class GradA, class GradB>
Tensor binary(const char* kind, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  Shape shape = broadcast_shape(kind, a, b);
  Tensor out = make(shape);
  Bcast bc{out.rows(), out.cols(), a.rows(), a.cols(), b.rows(), b.cols()};
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  const bool same = a.numel() == out.numel() && b.numel() == out.numel();
  if (same) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < bc.rows; ++i)
      for (std::size_t j = 0; j < bc.cols; ++j) od[i * bc.cols + j] = fwd(ad[bc.ia(i, j)], bd[bc.ib(i, j)]);
  }
  if (tracking({&a, &b})) {
    record(kind, {a, b}, out, [a, b, out, bc, same, ga, gb]() mutable {
      auto g = out.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto gA = a.grad_mut();
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) gA[i] += ga(g[i], ad[i], bd[i]);
        } else {
          for (std::size_t i = 0; i < bc.rows; ++i)
            for (std::size_t j = 0; j < bc.cols; ++j) {
              auto ia = bc.ia(i, j), ib = bc.ib(i, j);
              gA[ia] += ga(g[i * bc.cols + j], ad[ia], bd[ib]);
            }
        }
      }
      if (b.requires_grad()) {
        auto gB = b.grad_mut();
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) gB[i] += gb(g[i], ad[i], bd[i]);
        } else {
          for (std::size_t i = 0; i < bc.rows; ++i)
            for (std::size_t j = 0; j < bc.cols; ++j) {
              auto ia = bc.ia(i, j), ib = bc.ib(i, j);
              gB[ib] += gb(g[i * bc.cols + j], ad[ia], bd[ib]);
            }
        }
      }
    });
  }
  return out;
}

template <class Fwd, class Deriv>
Tensor unary(const char* kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make(x.shape());
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  if (tracking({&x})) {
    // deriv(x, y) with y = f(x)
    record(kind, {x}, out, [x, out, deriv]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto yd = out.data();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], yd[i]);
    });
  }
  return out;
}

Real stable_sigmoid(Real v) {
  if (v >= 0) return Real{1} / (Real{1} + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real{1} + e);
}

}  // namespace

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows()) shape_fail("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make({m, n});
  kernels::gemm_nn(m, n, k, a.data(), b.data(), out.data_mut(), false);
  if (tracking({&a, &b})) {
    record("matmul", {a, b}, out, [a, b, out, m, n, k]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) kernels::gemm_nt(m, k, n, g, b.data(), a.grad_mut(), true);
      if (b.requires_grad()) kernels::gemm_tn(k, n, m, a.data(), g, b.grad_mut(), true);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real g, Real, Real) { return g; },
      [](Real g, Real, Real) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return g * x; });
}

Tensor scale(const Tensor& x, Real factor) { return affine(x, factor, Real{0}); }

Tensor affine(const Tensor& x, Real factor, Real shift) {
  return unary(
      "affine", x, [=](Real v) { return factor * v + shift; }, [=](Real, Real) { return factor; });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows || p.rank() > 2) shape_fail("concat", parts[0], p);
    cols += p.cols();
  }
  Tensor out = make({rows, cols});
  auto od = out.data_mut();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pd.data() + r * pc, pc, od.data() + r * cols + off);
    off += pc;
  }
  if (tracking(parts)) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat", ins, out, [ins, out, rows, cols]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : ins) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + off + c];
        }
        off += pc;
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols || p.rank() > 2) shape_fail("concat_rows", parts[0], p);
    rows += p.rows();
  }
  Tensor out = make({rows, cols});
  auto od = out.data_mut();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + off);
    off += p.numel();
  }
  if (tracking(parts)) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat_rows", ins, out, [ins, out]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.cols() || x.rank() > 2) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols(), w = end - begin;
  Tensor out = make({rows, w});
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.data() + r * cols + begin, w, od.data() + r * w);
  if (tracking({&x})) {
    record("slice", {x}, out, [x, out, rows, cols, begin, w]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) gx[r * cols + begin + c] += g[r * w + c];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows() || x.rank() > 2) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_string(x.shape()));
  }
  const std::size_t cols = x.cols();
  Tensor out = make({end - begin, cols});
  auto xd = x.data();
  std::copy(xd.begin() + begin * cols, xd.begin() + end * cols, out.data_mut().begin());
  if (tracking({&x})) {
    record("slice_rows", {x}, out, [x, out, begin, cols]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    record("reshape", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() > 2) throw ShapeError("transpose: rank > 2 " + shape_string(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = make({c, r});
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) od[j * r + i] = xd[i * c + j];
  if (tracking({&x})) {
    record("transpose", {x}, out, [x, out, r, c]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real{1} - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](Real, Real y) { return y * (Real{1} - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real{1} / v; });
}

Tensor softmax(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = make(x.shape());
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xd.data() + r * cols;
    Real* o = od.data() + r * cols;
    const Real mx = *std::max_element(in, in + cols);
    Real total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  if (tracking({&x})) {
    record("softmax", {x}, out, [x, out, rows, cols]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r) {
        Real dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = make(x.shape());
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xd.data() + r * cols;
    Real* o = od.data() + r * cols;
    const Real mx = *std::max_element(in, in + cols);
    Real total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  if (tracking({&x})) {
    record("log_softmax", {x}, out, [x, out, rows, cols]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r) {
        Real gsum = 0;
        for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          gx[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gsum;
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = table.rows(), dim = table.cols();
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " out of range for table " +
                       shape_string(table.shape()));
    }
  }
  Tensor out = make({ids.size(), dim});
  auto td = table.data();
  auto od = out.data_mut();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * dim, dim, od.data() + i * dim);
  if (tracking({&table})) {
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    record("embedding", {table}, out, [table, out, idv, dim]() mutable {
      auto g = out.grad();
      auto gt = table.grad_mut();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(idv[i]) * dim;
        for (std::size_t c = 0; c < dim; ++c) gt[base + c] += g[i * dim + c];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (tracking({&x})) {
    record("sum", {x}, out, [x, out]() mutable {
      const Real g = out.grad()[0];
      for (auto& v : x.grad_mut()) v += g;
    });
  }
  return out;
}

Tensor row_sum(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = make({rows, 1});
  auto xd = x.data();
  auto od = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) {
    Real total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += xd[r * cols + c];
    od[r] = total;
  }
  if (tracking({&x})) {
    record("row_sum", {x}, out, [x, out, rows, cols]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r];
    });
  }
  return out;
}

Tensor block_scores(const Tensor& query, const Tensor& memory, std::size_t steps) {
  const std::size_t batch = query.rows(), dim = query.cols();
  if (steps == 0 || memory.rows() != batch * steps || memory.cols() != dim) {
    shape_fail("block_scores", query, memory);
  }
  Tensor out = make({batch, steps});
  auto q = query.data();
  auto m = memory.data();
  auto od = out.data_mut();
  for (std::size_t b = 0; b < batch; ++b) {
    kernels::gemm_nt_serial(1, steps, dim, q.subspan(b * dim, dim), m.subspan(b * steps * dim, steps * dim),
                            od.subspan(b * steps, steps), false);
  }
  if (tracking({&query, &memory})) {
    record("block_scores", {query, memory}, out, [query, memory, out, batch, steps, dim]() mutable {
      auto g = out.grad();
      auto q = query.data();
      auto m = memory.data();
      if (query.requires_grad()) {
        auto gq = query.grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          kernels::gemm_nn_serial(1, dim, steps, g.subspan(b * steps, steps), m.subspan(b * steps * dim, steps * dim),
                                  gq.subspan(b * dim, dim), true);
      }
      if (memory.requires_grad()) {
        auto gm = memory.grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          kernels::gemm_tn_serial(steps, dim, 1, g.subspan(b * steps, steps), q.subspan(b * dim, dim),
                                  gm.subspan(b * steps * dim, steps * dim), true);
      }
    });
  }
  return out;
}

Tensor block_context(const Tensor& weights, const Tensor& memory) {
  const std::size_t batch = weights.rows(), steps = weights.cols(), dim = memory.cols();
  if (memory.rows() != batch * steps) shape_fail("block_context", weights, memory);
  Tensor out = make({batch, dim});
  auto w = weights.data();
  auto m = memory.data();
  auto od = out.data_mut();
  for (std::size_t b = 0; b < batch; ++b) {
    kernels::gemm_nn_serial(1, dim, steps, w.subspan(b * steps, steps), m.subspan(b * steps * dim, steps * dim),
                            od.subspan(b * dim, dim), false);
  }
  if (tracking({&weights, &memory})) {
    record("block_context", {weights, memory}, out, [weights, memory, out, batch, steps, dim]() mutable {
      auto g = out.grad();
      auto w = weights.data();
      auto m = memory.data();
      if (weights.requires_grad()) {
        auto gw = weights.grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          kernels::gemm_nt_serial(1, steps, dim, g.subspan(b * dim, dim), m.subspan(b * steps * dim, steps * dim),
                                  gw.subspan(b * steps, steps), true);
      }
      if (memory.requires_grad()) {
        auto gm = memory.grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          kernels::gemm_tn_serial(steps, dim, 1, w.subspan(b * steps, steps), g.subspan(b * dim, dim),
                                  gm.subspan(b * steps * dim, steps * dim), true);
      }
    });
  }
  return out;
}

Tensor interleave_steps(std::span<const Tensor> steps) {
  if (steps.empty()) throw ShapeError("interleave_steps: no inputs");
  const std::size_t batch = steps[0].rows(), dim = steps[0].cols(), n = steps.size();
  for (const auto& s : steps) {
    if (s.rows() != batch || s.cols() != dim) shape_fail("interleave_steps", steps[0], s);
  }
  Tensor out = make({batch * n, dim});
  auto od = out.data_mut();
  for (std::size_t t = 0; t < n; ++t) {
    auto sd = steps[t].data();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(sd.data() + b * dim, dim, od.data() + (b * n + t) * dim);
  }
  if (tracking(steps)) {
    std::vector<Tensor> ins(steps.begin(), steps.end());
    record("interleave_steps", ins, out, [ins, out, batch, dim, n]() mutable {
      auto g = out.grad();
      for (std::size_t t = 0; t < n; ++t) {
        if (!ins[t].requires_grad()) continue;
        auto gs = ins[t].grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < dim; ++c) gs[b * dim + c] += g[(b * n + t) * dim + c];
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& log_probs, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  const std::size_t steps = log_probs.rows(), vocab = log_probs.cols();
  if (targets.size() != steps || mask.size() != steps) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries for log-probs " +
                     shape_string(log_probs.shape()));
  }
  std::size_t count = 0;
  Real total = 0;
  auto lp = log_probs.data();
  for (std::size_t i = 0; i < steps; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    total -= lp[i * vocab + static_cast<std::size_t>(targets[i])];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  const Real inv = Real{1} / static_cast<Real>(count);
  Tensor out = Tensor::scalar(total * inv);
  if (tracking({&log_probs})) {
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    record("cross_entropy", {log_probs}, out, [log_probs, out, tv, mv, vocab, inv]() mutable {
      const Real g = out.grad()[0] * inv;
      auto gl = log_probs.grad_mut();
      for (std::size_t i = 0; i < tv.size(); ++i) {
        if (mv[i]) gl[i * vocab + static_cast<std::size_t>(tv[i])] -= g;
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, Real p, bool training, Rng& rng) {
  if (!(p >= 0) || p >= 1) throw std::invalid_argument("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Real keep = Real{1} / (Real{1} - p);
  std::vector<Real> mask(x.numel());
  for (auto& m : mask) m = unif(rng) < p ? Real{0} : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace ops

namespace {
constexpr std::pair<Primitive, std::string_view> kNames[] = {
    {Primitive::matmul, "matmul"},   {Primitive::add, "add"},
    {Primitive::sub, "sub"},         {Primitive::mul, "mul"},
    {Primitive::scale, "scale"},     {Primitive::concat, "concat"},
    {Primitive::slice, "slice"},     {Primitive::tanh, "tanh"},
    {Primitive::sigmoid, "sigmoid"}, {Primitive::exp, "exp"},
    {Primitive::log, "log"},         {Primitive::softmax, "softmax"},
    {Primitive::log_softmax, "log_softmax"}, {Primitive::embedding, "embedding"},
    {Primitive::sum, "sum"},
};

void arity(Primitive kind, std::span<const Tensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw std::invalid_argument(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
}
}  // namespace

Primitive parse_primitive(std::string_view name) {
  for (const auto& [k, n] : kNames) {
    if (n == name) return k;
  }
  throw std::invalid_argument("unknown primitive '" + std::string(name) + "'");
}

std::string_view primitive_name(Primitive kind) {
  for (const auto& [k, n] : kNames) {
    if (k == kind) return n;
  }
  throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
}

Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveArgs& args) {
  switch (kind) {
    case Primitive::matmul: arity(kind, inputs, 2); return ops::matmul(inputs[0], inputs[1]);
    case Primitive::add: arity(kind, inputs, 2); return ops::add(inputs[0], inputs[1]);
    case Primitive::sub: arity(kind, inputs, 2); return ops::sub(inputs[0], inputs[1]);
    case Primitive::mul: arity(kind, inputs, 2); return ops::mul(inputs[0], inputs[1]);
    case Primitive::scale: arity(kind, inputs, 1); return ops::scale(inputs[0], args.scalar);
    case Primitive::concat: return ops::concat(inputs);
    case Primitive::slice: arity(kind, inputs, 1); return ops::slice_cols(inputs[0], args.begin, args.end);
    case Primitive::tanh: arity(kind, inputs, 1); return ops::tanh(inputs[0]);
    case Primitive::sigmoid: arity(kind, inputs, 1); return ops::sigmoid(inputs[0]);
    case Primitive::exp: arity(kind, inputs, 1); return ops::exp(inputs[0]);
    case Primitive::log: arity(kind, inputs, 1); return ops::log(inputs[0]);
    case Primitive::softmax: arity(kind, inputs, 1); return ops::softmax(inputs[0]);
    case Primitive::log_softmax: arity(kind, inputs, 1); return ops::log_softmax(inputs[0]);
    case Primitive::embedding: arity(kind, inputs, 1); return ops::embedding(inputs[0], args.ids);
    case Primitive::sum: arity(kind, inputs, 1); return ops::sum(inputs[0]);
  }
  throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
}

}  // namespace sml
