#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "doctest.h"

#include "debias_mf/data.hpp"
#include "debias_mf/error.hpp"
#include "debias_mf/sam.hpp"
#include "debias_mf/textprep.hpp"
#include "gradient_check.hpp"
#include "oracles.hpp"

using namespace debias_mf;

using testing::random_corpus;
using testing::random_indicator;
using testing::residual_by_definition;
using testing::svd_top;

TEST_CASE("softplus weights") {
  CHECK(weight_from_logit(0.0) == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(std::abs(weight_from_logit(-20.0) - 1.0) <= 1e-8);
  CHECK(weight_from_logit(-800.0) >= 1.0);
  CHECK(weight_from_logit(800.0) == doctest::Approx(801.0));
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(std::isfinite(sigmoid(-800.0)));
}

TEST_CASE("a zero head gives equal weights on any corpus") {
  std::mt19937_64 rng(1);
  const auto corpus = random_corpus(7, 6, 10, rng);
  const EncoderParams head({EncoderKind::kConv, 10, 3, 2, {3}, 1});
  const auto w = weights_from_text(head, corpus);
  for (double x : w.weights) CHECK(x == w.weights[0]);
  CHECK(w.weights[0] == doctest::Approx(1.0 + std::log(2.0)));
  const EncoderParams wide({EncoderKind::kConv, 10, 3, 2, {3}, 2});
  CHECK_THROWS_AS(weights_from_text(wide, corpus), UsageError);
}

TEST_CASE("spectral norm of zero and rank-one matrices") {
  const auto zero = spectral_norm(DenseOperator(Matrix(4, 3)));
  CHECK(zero.value == 0.0);
  CHECK(zero.converged);

  const std::vector<double> a = {1, -2, 0.5, 3}, b = {2, 0, -1};
  Matrix m(4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) m(i, j) = a[i] * b[j];
  }
  const auto r = spectral_norm(DenseOperator(m));
  CHECK(std::abs(r.value - std::sqrt(14.25) * std::sqrt(5.0)) <= 1e-10);
}

TEST_CASE("power iteration matches a dense SVD on random matrices") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix m(20, 30);
    for (auto& v : m.values()) v = normal(rng);
    PowerIterationOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    const auto r = spectral_norm(DenseOperator(m), opt);
    worst = std::max(worst, std::abs(r.value - svd_top(m)));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("spectral norm bounds every probe ratio from above") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto ind = random_indicator(15, 12, 0.4, rng);
  std::vector<double> w(12);
  for (auto& x : w) x = 1.0 + std::abs(normal(rng));
  const MaskedResidual op(ind, w);
  const double sigma = spectral_norm(op).value;
  for (int probe = 0; probe < 200; ++probe) {
    std::vector<double> x(12), y(15);
    for (auto& v : x) v = normal(rng);
    op.apply(x, y);
    double nx = 0, ny = 0;
    for (double v : x) nx += v * v;
    for (double v : y) ny += v * v;
    CHECK(std::sqrt(ny / nx) <= sigma * (1.0 + 1e-9));
  }
}

TEST_CASE("matrix-free residual products equal the dense construction") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> density(0.05, 0.9);
  for (std::size_t m : {1u, 2u, 7u, 23u, 50u}) {
    for (std::size_t n : {1u, 3u, 16u, 50u}) {
      const auto ind = random_indicator(m, n, density(rng), rng);
      std::vector<double> w(n);
      for (auto& x : w) x = 1.0 + 3.0 * std::abs(normal(rng));
      const MaskedResidual op(ind, w);
      const auto dense = residual_by_definition(ind, w);
      CHECK(op.to_dense() == dense);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) CHECK(op.entry(i, j) == dense(i, j));
      }

      std::vector<double> x(n), y(m), ty(m), tx(n), ref_y(m, 0.0), ref_x(n, 0.0);
      for (auto& v : x) v = normal(rng);
      for (auto& v : ty) v = normal(rng);
      op.apply(x, y);
      op.apply_transpose(ty, tx);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          ref_y[i] += dense(i, j) * x[j];
          ref_x[j] += dense(i, j) * ty[i];
        }
      }
      for (std::size_t i = 0; i < m; ++i) CHECK(std::abs(y[i] - ref_y[i]) <= 1e-12);
      for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(tx[j] - ref_x[j]) <= 1e-12);
    }
  }
}

TEST_CASE("parallel residual products equal the serial ones") {
  std::mt19937_64 rng(3);
  const auto ind = random_indicator(40, 30, 0.3, rng);
  std::vector<double> w(30, 2.5), x(30, 0.25), a(40), b(40);
  const MaskedResidual serial(ind, w, 1), parallel(ind, w, 4);
  serial.apply(x, a);
  parallel.apply(x, b);
  CHECK(a == b);
}

TEST_CASE("objective gradient matches finite differences of a dense-SVD objective") {
  std::mt19937_64 rng(77);
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 100 && checked < 24; ++trial) {
    const std::size_t m = 6 + trial % 5, n = 5 + trial % 4;
    const auto ind = random_indicator(m, n, 0.5, rng);
    const auto corpus = random_corpus(n, 5, 8, rng);
    auto head = EncoderParams::random({EncoderKind::kConv, 8, 3, 2, {2, 3}, 1}, trial, 0.6);
    double margin = INFINITY;
    for (std::size_t j = 0; j < n; ++j) margin = std::min(margin, testing::pool_margin(head, corpus.sequence(j)));
    if (margin < testing::kMinPoolMargin) continue;

    SamEvaluationOptions opt;
    opt.power.tol = 1e-15;
    opt.power.max_iters = 100000;
    const auto eval = objective_and_gradient(head, corpus, ind, opt);
    CHECK(std::abs(eval.objective - svd_top(residual_by_definition(ind, eval.weights))) <= 1e-8);

    const auto fd = testing::central_difference(head.values(), [&] {
      return svd_top(residual_by_definition(ind, weights_from_text(head, corpus).weights));
    });
    CAPTURE(trial);
    CHECK(testing::relative_error(eval.gradient.values(), fd) <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("weight gradient on a fully observed matrix matches finite differences") {
  const std::size_t m = 8, n = 4;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> all;
  for (std::uint32_t i = 0; i < m; ++i) {
    for (std::uint32_t j = 0; j < n; ++j) all.push_back({i, j});
  }
  const IndicatorView ind(m, n, all);
  std::vector<double> w = {1.4, 2.0, 1.1, 3.0};
  SamEvaluationOptions opt;
  opt.power.tol = 1e-15;
  const std::vector<double> base = w;
  const auto fd = testing::central_difference(w, [&] { return sam_objective(w, ind, opt); });
  // Fully observed: M has columns (w_j - 1) 1, so ||M|| = sqrt(m) ||w - 1||.
  double norm = 0.0;
  for (double x : base) norm += (x - 1.0) * (x - 1.0);
  norm = std::sqrt(norm);
  CHECK(sam_objective(base, ind, opt) == doctest::Approx(std::sqrt(double(m)) * norm).epsilon(1e-10));
  for (std::size_t j = 0; j < n; ++j) {
    CHECK(fd[j] == doctest::Approx(std::sqrt(double(m)) * (base[j] - 1.0) / norm).epsilon(1e-6));
  }
}

TEST_CASE("a single observed cell has objective |w - 1|") {
  const IndicatorView ind(1, 1, {{0, 0}});
  for (double w : {1.0, 1.5, 4.0}) {
    const std::vector<double> ws = {w};
    CHECK(sam_objective(ws, ind) == doctest::Approx(std::abs(w - 1.0)));
  }
}

TEST_CASE("an empty indicator gives an exactly zero head gradient") {
  std::mt19937_64 rng(4);
  const IndicatorView ind(5, 6);
  const auto corpus = random_corpus(6, 5, 9, rng);
  const auto head = EncoderParams::random({EncoderKind::kConv, 9, 3, 2, {3}, 1}, 3);
  const auto eval = objective_and_gradient(head, corpus, ind);
  CHECK(eval.objective == doctest::Approx(std::sqrt(30.0)));
  for (double g : eval.gradient.values()) CHECK(g == 0.0);
}

TEST_CASE("frobenius objective and its gradient") {
  std::mt19937_64 rng(6);
  const auto ind = random_indicator(9, 5, 0.5, rng);
  std::vector<double> w = {1.0, 1.7, 2.2, 1.3, 4.0};
  SamEvaluationOptions opt;
  opt.objective = SamObjective::kFrobenius;
  const auto dense = residual_by_definition(ind, w);
  double expected = 0.0;
  for (double v : dense.values()) expected += v * v;
  CHECK(sam_objective(w, ind, opt) == doctest::Approx(expected).epsilon(1e-12));
  const auto corpus = random_corpus(5, 4, 6, rng);
  auto head = EncoderParams::random({EncoderKind::kAverage, 6, 3, 0, {}, 1}, 2, 0.5);
  const auto eval = objective_and_gradient(head, corpus, ind, opt);
  const auto fd = testing::central_difference(head.values(), [&] {
    return sam_objective(weights_from_text(head, corpus).weights, ind, opt);
  });
  CHECK(testing::relative_error(eval.gradient.values(), fd) <= 1e-6);
  CHECK(parse_sam_objective("frobenius") == SamObjective::kFrobenius);
  CHECK_THROWS_AS(parse_sam_objective("nuclear"), UsageError);
}

TEST_CASE("fit drives weights to one on a fully observed matrix") {
  std::mt19937_64 rng(8);
  const std::size_t m = 20, n = 6;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> all;
  for (std::uint32_t i = 0; i < m; ++i) {
    for (std::uint32_t j = 0; j < n; ++j) all.push_back({i, j});
  }
  const IndicatorView ind(m, n, all);
  const auto corpus = random_corpus(n, 6, 12, rng);
  const auto head = EncoderParams::random({EncoderKind::kConv, 12, 4, 3, {3}, 1}, 5);
  SamFitConfig cfg;
  cfg.max_iters = 2000;
  cfg.tol = 1e-10;
  const auto model = fit_sam(head, corpus, ind, cfg);
  for (double w : model.weights) {
    CHECK(w >= 1.0);
    CHECK(w - 1.0 <= 0.05);
  }
  for (std::size_t k = 1; k < model.objective_trace.size(); ++k) {
    CHECK(model.objective_trace[k] <= model.objective_trace[k - 1]);
  }
}

TEST_CASE("zero learning rate returns the initial weights and fitting is deterministic") {
  std::mt19937_64 rng(10);
  const auto ind = random_indicator(30, 8, 0.4, rng);
  const auto corpus = random_corpus(8, 6, 10, rng);
  const auto head = EncoderParams::random({EncoderKind::kConv, 10, 4, 3, {3}, 1}, 7);
  SamFitConfig frozen;
  frozen.learning_rate = 0.0;
  const auto init = weights_from_text(head, corpus).weights;
  CHECK(fit_sam(head, corpus, ind, frozen).weights == init);

  SamFitConfig cfg;
  cfg.max_iters = 30;
  const auto a = fit_sam(head, corpus, ind, cfg);
  const auto b = fit_sam(head, corpus, ind, cfg);
  CHECK(a.weights == b.weights);
  CHECK(a.objective_trace.back() <= a.objective_trace.front());
}

TEST_CASE("weights CSV round trip") {
  const std::vector<double> w = {1.0, 1.0 / 3.0 + 1.0, 7.25};
  const auto path = std::filesystem::temp_directory_path() / "debias_mf_weights.csv";
  write_weights_csv(w, path);
  CHECK(read_weights_csv(path) == w);
}
