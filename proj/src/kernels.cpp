// SPDX-License-Identifier: Apache-2.0
#include "sml/kernels.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sml::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 16};

bool go_parallel(std::size_t macs) {
#ifdef _OPENMP
  return macs >= g_threshold.load(std::memory_order_relaxed) && !omp_in_parallel() &&
         omp_get_max_threads() > 1;
#else
  (void)macs;
  return false;
#endif
}

inline void nn_row(std::size_t i, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
                   bool accumulate) {
  Real* crow = c + i * n;
  if (!accumulate) std::fill(crow, crow + n, Real{0});
  const Real* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const Real av = arow[p];
    const Real* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void nt_row(std::size_t i, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
                   bool accumulate) {
  const Real* arow = a + i * k;
  Real* crow = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const Real* brow = b + j * k;
    Real acc = accumulate ? crow[j] : Real{0};
    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
    crow[j] = acc;
  }
}

inline void tn_row(std::size_t i, std::size_t m, std::size_t n, std::size_t k, const Real* a,
                   const Real* b, Real* c, bool accumulate) {
  Real* crow = c + i * n;
  if (!accumulate) std::fill(crow, crow + n, Real{0});
  for (std::size_t p = 0; p < k; ++p) {
    const Real av = a[p * m + i];
    if (av == Real{0}) continue;
    const Real* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

}  // namespace

void gemm_nn_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) nn_row(i, n, k, a.data(), b.data(), c.data(), accumulate);
}

void gemm_nn_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    nn_row(static_cast<std::size_t>(i), n, k, a.data(), b.data(), c.data(), accumulate);
  }
}

void gemm_nt_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) nt_row(i, n, k, a.data(), b.data(), c.data(), accumulate);
}

void gemm_nt_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    nt_row(static_cast<std::size_t>(i), n, k, a.data(), b.data(), c.data(), accumulate);
  }
}

void gemm_tn_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) tn_row(i, m, n, k, a.data(), b.data(), c.data(), accumulate);
}

void gemm_tn_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    tn_row(static_cast<std::size_t>(i), m, n, k, a.data(), b.data(), c.data(), accumulate);
  }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate) {
  if (go_parallel(m * n * k))
    gemm_nn_parallel(m, n, k, a, b, c, accumulate);
  else
    gemm_nn_serial(m, n, k, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate) {
  if (go_parallel(m * n * k))
    gemm_nt_parallel(m, n, k, a, b, c, accumulate);
  else
    gemm_nt_serial(m, n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate) {
  if (go_parallel(m * n * k))
    gemm_tn_parallel(m, n, k, a, b, c, accumulate);
  else
    gemm_tn_serial(m, n, k, a, b, c, accumulate);
}

std::size_t parallel_threshold() { return g_threshold.load(); }
void set_parallel_threshold(std::size_t macs) { g_threshold.store(macs); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace sml::kernels
