#include "debias_mf/kernels.hpp"

namespace debias_mf::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += alpha * x[k];
}

double squared_distance_scalar(const double* a, const double* b,
                               std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

void rank1_update_scalar(double alpha, const double* x, double* a,
                         std::size_t d) {
  for (std::size_t r = 0; r < d; ++r) {
    const double ax = alpha * x[r];
    double* row = a + r * d;
    for (std::size_t c = 0; c < d; ++c) row[c] += ax * x[c];
  }
}

void gemv_scalar(const double* m, const double* x, double* y, std::size_t rows,
                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot_scalar(m + r * cols, x, cols);
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar",           dot_scalar,
                                 axpy_scalar,        squared_distance_scalar,
                                 rank1_update_scalar, gemv_scalar};
  return table;
}

}  // namespace debias_mf::kernels
