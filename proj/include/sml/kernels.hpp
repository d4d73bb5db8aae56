// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "sml/tensor.hpp"

// Dense matrix kernels behind the autodiff matmul primitive.
//
// Every kernel comes in two flavours: a serial reference (kept for testing
// and benchmarking) and an OpenMP version that splits output rows across
// threads. Both accumulate each output element over the inner dimension in
// the same order, so results agree bit for bit.
namespace sml::kernels {

// C (m x n) [+]= A (m x k) * B (k x n)
void gemm_nn_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate);
void gemm_nn_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate);

// C (m x n) [+]= A (m x k) * B^T, with B stored (n x k)
void gemm_nt_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate);
void gemm_nt_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate);

// C (m x n) [+]= A^T * B, with A stored (k x m) and B stored (k x n)
void gemm_tn_serial(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                    std::span<const Real> b, std::span<Real> c, bool accumulate);
void gemm_tn_parallel(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
                      std::span<const Real> b, std::span<Real> c, bool accumulate);

// Dispatchers: parallel above a work threshold and outside an active parallel region.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const Real> a,
             std::span<const Real> b, std::span<Real> c, bool accumulate);

// Multiply-accumulate count above which the dispatchers go parallel.
std::size_t parallel_threshold();
void set_parallel_threshold(std::size_t macs);

int max_threads();

}  // namespace sml::kernels
