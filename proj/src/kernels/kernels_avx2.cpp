// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "debias_mf/kernels.hpp"

#if defined(DEBIAS_MF_HAVE_AVX2)
#include <immintrin.h>

namespace debias_mf::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + k), _mm256_loadu_pd(b + k), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + k + 4),
                           _mm256_loadu_pd(b + k + 4), acc1);
  }
  for (; k + 4 <= n; k += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + k), _mm256_loadu_pd(b + k), acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    _mm256_storeu_pd(y + k, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + k),
                                            _mm256_loadu_pd(y + k)));
  }
  for (; k < n; ++k) y[k] += alpha * x[k];
}

double squared_distance_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const __m256d diff =
        _mm256_sub_pd(_mm256_loadu_pd(a + k), _mm256_loadu_pd(b + k));
    acc = _mm256_fmadd_pd(diff, diff, acc);
  }
  double s = hsum(acc);
  for (; k < n; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

void rank1_update_avx2(double alpha, const double* x, double* a,
                       std::size_t d) {
  for (std::size_t r = 0; r < d; ++r) axpy_avx2(alpha * x[r], x, a + r * d, d);
}

void gemv_avx2(const double* m, const double* x, double* y, std::size_t rows,
               std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot_avx2(m + r * cols, x, cols);
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{"avx2",           dot_avx2,
                                 axpy_avx2,        squared_distance_avx2,
                                 rank1_update_avx2, gemv_avx2};
  return &table;
}

}  // namespace debias_mf::kernels

#else

namespace debias_mf::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace debias_mf::kernels

#endif
