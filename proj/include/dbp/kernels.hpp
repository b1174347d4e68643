#pragma once

#include <cstddef>
#include <span>

// Dense inner loops used by the tensor ops. Every kernel exists twice: a
// serial reference and an OpenMP version. Both compute each output element
// with the same operation order, so their results agree bit-for-bit for any
// thread count, and a row's result never depends on how many rows are in
// the batch.
namespace dbp::kernels {

namespace serial {

// c[m x n] = a[m x k] * b[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c);
// c[m x k] = g[m x n] * w[k x n]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c);
// c[k x n] = a[m x k]^T * g[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace parallel

// Dispatchers used by the ops: parallel above a work threshold.
void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// Work (multiply-adds) above which the dispatchers go parallel.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

int max_threads();
void set_threads(int n);

}  // namespace dbp::kernels
