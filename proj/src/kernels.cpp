#include "dbp/kernels.hpp"

#include <omp.h>

#include <algorithm>

namespace dbp::kernels {

namespace serial {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* wp = w.data() + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * wp[j];
      c[i * k + p] = acc;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c) {
  std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k * n), 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    double* cp = c.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      const double* gi = g.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c.data() + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* gi = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* wp = w.data() + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * wp[j];
      c[i * k + p] = acc;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c) {
  const auto cols = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pp = 0; pp < cols; ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    double* cp = c.data() + p * n;
    std::fill(cp, cp + n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      const double* gi = g.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  const auto len = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < len; ++i) y[i] += alpha * x[i];
}

}  // namespace parallel

namespace {
bool go_parallel(std::size_t work) {
  return work >= kParallelThreshold && omp_get_max_threads() > 1 &&
         !omp_in_parallel();
}
}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  if (go_parallel(m * k * n) && m > 1)
    parallel::gemm_nn(m, k, n, a, b, c);
  else
    serial::gemm_nn(m, k, n, a, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             std::span<const double> g, std::span<const double> w,
             std::span<double> c) {
  if (go_parallel(m * k * n) && m > 1)
    parallel::gemm_nt(m, n, k, g, w, c);
  else
    serial::gemm_nt(m, n, k, g, w, c);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> g,
             std::span<double> c) {
  if (go_parallel(m * k * n))
    parallel::gemm_tn(m, k, n, a, g, c);
  else
    serial::gemm_tn(m, k, n, a, g, c);
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (go_parallel(x.size()))
    parallel::axpy(alpha, x, y);
  else
    serial::axpy(alpha, x, y);
}

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

}  // namespace dbp::kernels
