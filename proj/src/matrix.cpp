#include "debias_mf/matrix.hpp"

#include <cmath>

#include "debias_mf/kernels.hpp"

namespace debias_mf {

bool cholesky_solve(std::span<double> a, std::span<double> b, std::size_t d) {
  const auto& k = kernels::active();
  // Lower factor stored in place, row-major: L(r, c) = a[r*d + c], c <= r.
  for (std::size_t r = 0; r < d; ++r) {
    double* row_r = a.data() + r * d;
    for (std::size_t c = 0; c <= r; ++c) {
      const double* row_c = a.data() + c * d;
      const double s = row_r[c] - k.dot(row_r, row_c, c);
      if (r == c) {
        if (!(s > 0.0) || !std::isfinite(s)) return false;
        row_r[r] = std::sqrt(s);
      } else {
        row_r[c] = s / row_c[c];
      }
    }
  }
  // L y = b
  for (std::size_t r = 0; r < d; ++r) {
    const double* row_r = a.data() + r * d;
    b[r] = (b[r] - k.dot(row_r, b.data(), r)) / row_r[r];
  }
  // L^T x = y
  for (std::size_t r = d; r-- > 0;) {
    double s = b[r];
    for (std::size_t c = r + 1; c < d; ++c) s -= a[c * d + r] * b[c];
    b[r] = s / a[r * d + r];
  }
  return true;
}

}  // namespace debias_mf
