// SPDX-License-Identifier: Apache-2.0
// Serial reference vs OpenMP gemm kernels on decoder-sized shapes.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "sml/kernels.hpp"

namespace {

using sml::Real;
using Kernel = void (*)(std::size_t, std::size_t, std::size_t, std::span<const Real>, std::span<const Real>,
                        std::span<Real>, bool);

void run(benchmark::State& state, Kernel kernel) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<Real> a(m * k), b(k * n), c(m * n);
  for (auto& v : a) v = static_cast<Real>(dist(rng));
  for (auto& v : b) v = static_cast<Real>(dist(rng));
  for (auto _ : state) {
    kernel(m, n, k, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * k));
  state.counters["threads"] = sml::kernels::max_threads();
}

void shapes(benchmark::internal::Benchmark* b) {
  // batch x vocab x hidden (output projection), batch x 4h x (e+h) (LSTM gates), a square case
  b->Args({16, 2000, 256})->Args({64, 1024, 512})->Args({256, 256, 256});
}

void BM_gemm_nn_serial(benchmark::State& s) { run(s, sml::kernels::gemm_nn_serial); }
void BM_gemm_nn_parallel(benchmark::State& s) { run(s, sml::kernels::gemm_nn_parallel); }
void BM_gemm_nt_serial(benchmark::State& s) { run(s, sml::kernels::gemm_nt_serial); }
void BM_gemm_nt_parallel(benchmark::State& s) { run(s, sml::kernels::gemm_nt_parallel); }
void BM_gemm_tn_serial(benchmark::State& s) { run(s, sml::kernels::gemm_tn_serial); }
void BM_gemm_tn_parallel(benchmark::State& s) { run(s, sml::kernels::gemm_tn_parallel); }

BENCHMARK(BM_gemm_nn_serial)->Apply(shapes);
BENCHMARK(BM_gemm_nn_parallel)->Apply(shapes);
BENCHMARK(BM_gemm_nt_serial)->Apply(shapes);
BENCHMARK(BM_gemm_nt_parallel)->Apply(shapes);
BENCHMARK(BM_gemm_tn_serial)->Apply(shapes);
BENCHMARK(BM_gemm_tn_parallel)->Apply(shapes);

}  // namespace

BENCHMARK_MAIN();
