#pragma once

// Inner-loop arithmetic used by the factorization, encoder and spectral-norm
// code. Every kernel has a scalar reference implementation and an AVX2+FMA
// implementation; one table is selected at startup from the CPU features
// (override with DEBIAS_MF_SIMD=scalar|avx2).

#include <cstddef>
#include <span>
#include <string_view>

namespace debias_mf::kernels {

struct KernelTable {
  std::string_view name;
  // sum_k a[k] * b[k]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[k] += alpha * x[k]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // sum_k (a[k] - b[k])^2
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
  // a (d x d, row-major) += alpha * x x^T
  void (*rank1_update)(double alpha, const double* x, double* a, std::size_t d);
  // y[r] = sum_k m[r*cols + k] * x[k] for r < rows
  void (*gemv)(const double* m, const double* x, double* y, std::size_t rows,
               std::size_t cols);
};

const KernelTable& scalar_table();
// Null when the binary was built without AVX2 support.
const KernelTable* avx2_table();

// The table chosen for this process. Fixed after first call.
const KernelTable& active();

// Forces a table; intended for tests and benchmarks. Returns false if the
// requested table is unavailable on this CPU.
bool select(std::string_view name);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

inline double squared_distance(std::span<const double> a,
                               std::span<const double> b) {
  return active().squared_distance(a.data(), b.data(), a.size());
}

inline double squared_norm(std::span<const double> a) {
  return active().dot(a.data(), a.data(), a.size());
}

}  // namespace debias_mf::kernels
