#pragma once

// Central finite differences for the gradient checks.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "debias_mf/encoder.hpp"

namespace debias_mf::testing {

// d f / d x_k by (f(x + h e_k) - f(x - h e_k)) / 2h, perturbing x in place.
template <class F>
std::vector<double> central_difference(std::span<double> x, F&& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double up = f();
    x[k] = saved - h;
    const double down = f();
    x[k] = saved;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|) in the Euclidean norm; 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Smallest gap between the winning window activation and any strictly lower
// one, over all pooled units of a conv encoder. Max-pooling has a kink where
// this is near zero and central differences straddle it; exact ties between
// identical windows move together and do not count. Infinity for the average
// variant.
inline double pool_margin(const EncoderParams& p, std::span<const std::uint32_t> seq) {
  const auto& cfg = p.config();
  double margin = INFINITY;
  if (cfg.kind != EncoderKind::kConv) return margin;
  const std::size_t e = cfg.embed_dim;
  for (std::size_t w = 0; w < cfg.windows.size(); ++w) {
    const std::size_t h = cfg.windows[w];
    const auto weights = p.filter_weights(w);
    for (std::size_t q = 0; q < cfg.filters; ++q) {
      std::vector<double> acts;
      for (std::size_t t = 0; t + h <= seq.size(); ++t) {
        double a = p.filter_bias(w)[q];
        for (std::size_t r = 0; r < h; ++r) {
          const auto emb = p.embedding(seq[t + r]);
          for (std::size_t c = 0; c < e; ++c) a += weights[q * h * e + r * e + c] * emb[c];
        }
        acts.push_back(std::tanh(a));
      }
      std::sort(acts.rbegin(), acts.rend());
      for (std::size_t k = 1; k < acts.size(); ++k) {
        if (acts[0] > acts[k]) {
          margin = std::min(margin, acts[0] - acts[k]);
          break;
        }
      }
    }
  }
  return margin;
}

inline constexpr double kMinPoolMargin = 1e-4;

}  // namespace debias_mf::testing
