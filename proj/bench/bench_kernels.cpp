#include <benchmark/benchmark.h>

#include <vector>

#include "dbp/kernels.hpp"
#include "dbp/rng.hpp"

namespace {

std::vector<double> random_matrix(std::size_t n, std::uint32_t index) {
  return dbp::rng::normal({42, dbp::rng::Stream::WeightInit, index}, n);
}

template <auto Gemm>
void BM_gemm_nn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 256, n = 128;
  const auto a = random_matrix(m * k, 0);
  const auto b = random_matrix(k * n, 1);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Gemm(m, k, n, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <auto Gemm>
void BM_gemm_tn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 256, n = 128;
  const auto a = random_matrix(m * k, 2);
  const auto g = random_matrix(m * n, 3);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    Gemm(m, k, n, a, g, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

}  // namespace

BENCHMARK(BM_gemm_nn<dbp::kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(512);
BENCHMARK(BM_gemm_nn<dbp::kernels::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(512);
BENCHMARK(BM_gemm_tn<dbp::kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(64)->Arg(512);
BENCHMARK(BM_gemm_tn<dbp::kernels::parallel::gemm_tn>)->Name("gemm_tn/parallel")->Arg(64)->Arg(512);

BENCHMARK_MAIN();
