#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"

#include "debias_mf/data.hpp"
#include "debias_mf/error.hpp"
#include "debias_mf/factorization.hpp"
#include "debias_mf/kernels.hpp"

using namespace debias_mf;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.values()) v = normal(rng);
  return m;
}

RatingDataset random_ratings(std::size_t m, std::size_t n, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(p);
  std::uniform_real_distribution<double> value(1.0, 5.0);
  std::vector<Rating> t;
  for (std::uint32_t i = 0; i < m; ++i) {
    for (std::uint32_t j = 0; j < n; ++j) {
      if (keep(rng) || i % n == j || j % m == i) t.push_back({i, j, value(rng)});
    }
  }
  return RatingDataset(m, n, std::move(t));
}

TrainState make_state(std::size_t m, std::size_t n, std::size_t d, std::mt19937_64& rng) {
  TrainState s;
  s.model.user = random_matrix(m, d, rng);
  s.model.item = random_matrix(n, d, rng);
  s.model.lambda_u = 0.7;
  s.model.lambda_v = 1.3;
  std::uniform_real_distribution<double> w(1.0, 3.0);
  s.weights.resize(n);
  for (auto& x : s.weights) x = w(rng);
  s.item_targets = random_matrix(n, d, rng, 0.5);
  return s;
}

double brute_loss(const TrainState& s, const RatingDataset& data) {
  double total = 0.0;
  for (const auto& t : data.triples()) {
    double p = 0.0;
    for (std::size_t k = 0; k < s.model.dim(); ++k) p += s.model.user(t.user, k) * s.model.item(t.item, k);
    total += s.weights[t.item] * (t.value - p) * (t.value - p);
  }
  for (double v : s.model.user.values()) total += s.model.lambda_u * v * v;
  for (std::size_t j = 0; j < s.model.item.rows(); ++j) {
    for (std::size_t k = 0; k < s.model.dim(); ++k) {
      const double diff = s.model.item(j, k) - s.item_targets(j, k);
      total += s.model.lambda_v * diff * diff;
    }
  }
  return total;
}

// argmin_x |A x - b|^2 for a stacked system, by Householder QR.
Eigen::VectorXd least_squares(const std::vector<std::vector<double>>& rows, const std::vector<double>& rhs) {
  Eigen::MatrixXd a(rows.size(), rows.front().size());
  Eigen::VectorXd b(rhs.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) a(r, c) = rows[r][c];
    b(r) = rhs[r];
  }
  return a.colPivHouseholderQr().solve(b);
}

SyntheticData small_synthetic(std::uint64_t seed) {
  const double levels[] = {0.3, 0.6};
  return generate_synthetic(120, 40, 3, grouped_propensity(40, levels), 0.3, seed);
}

}  // namespace

TEST_CASE("predict and loss functions agree with direct loops") {
  std::mt19937_64 rng(1);
  const auto data = random_ratings(9, 7, 0.4, rng);
  auto s = make_state(9, 7, 3, rng);
  CHECK(predict(s.model, 2, 3) == doctest::Approx(kernels::dot(s.model.user.row(2), s.model.item.row(3))));
  CHECK_THROWS_AS(predict(s.model, 9, 0), UsageError);
  CHECK_THROWS_AS(predict(s.model, 0, 7), UsageError);

  CHECK(complete_loss(s, data) == doctest::Approx(brute_loss(s, data)).epsilon(1e-12));

  TrainState plain = s;
  std::fill(plain.weights.begin(), plain.weights.end(), 1.0);
  plain.item_targets = Matrix(7, 3);
  CHECK(regularized_squared_loss(s.model, data) == doctest::Approx(brute_loss(plain, data)).epsilon(1e-12));
}

TEST_CASE("weighted risk validates its weights") {
  std::mt19937_64 rng(2);
  const auto data = random_ratings(5, 4, 0.5, rng);
  auto s = make_state(5, 4, 2, rng);
  std::vector<double> w(4, 1.0);
  CHECK(weighted_risk(s.model, data, w) ==
        doctest::Approx(regularized_squared_loss(s.model, data) -
                        s.model.lambda_u * kernels::squared_norm(s.model.user.values()) -
                        s.model.lambda_v * kernels::squared_norm(s.model.item.values())));
  w[1] = 0.99;
  CHECK_THROWS_AS(weighted_risk(s.model, data, w), UsageError);
  const std::vector<double> short_w(3, 1.0);
  CHECK_THROWS_AS(weighted_risk(s.model, data, short_w), UsageError);
}

TEST_CASE("variant names round trip") {
  for (auto v : {Variant::kMf, Variant::kMfPlus, Variant::kConvMf, Variant::kConvMfPlus,
                 Variant::kFtMf, Variant::kFtMfPlus}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("rcnnmf"), UsageError);
  CHECK(uses_sam(Variant::kFtMfPlus));
  CHECK_FALSE(uses_sam(Variant::kConvMf));
  CHECK(item_encoder_kind(Variant::kFtMf) == EncoderKind::kAverage);
  CHECK_FALSE(item_encoder_kind(Variant::kMfPlus).has_value());
  CHECK(needs_corpus(Variant::kMfPlus));
  CHECK_FALSE(needs_corpus(Variant::kMf));
}

TEST_CASE("user update is the exact weighted ridge minimizer") {
  std::mt19937_64 rng(3);
  const auto data = random_ratings(12, 10, 0.4, rng);
  auto s = make_state(12, 10, 4, rng);
  const RatingIndex index(data);
  const double before = complete_loss(s, data);
  update_users(s, index);
  CHECK(complete_loss(s, data) <= before);

  for (std::size_t i = 0; i < 12; ++i) {
    std::vector<std::vector<double>> rows;
    std::vector<double> rhs;
    for (const auto& e : index.row(i)) {
      const double sw = std::sqrt(s.weights[e.other]);
      std::vector<double> row(4);
      for (std::size_t k = 0; k < 4; ++k) row[k] = sw * s.model.item(e.other, k);
      rows.push_back(row);
      rhs.push_back(sw * e.value);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> row(4, 0.0);
      row[k] = std::sqrt(s.model.lambda_u);
      rows.push_back(row);
      rhs.push_back(0.0);
    }
    const auto x = least_squares(rows, rhs);
    for (std::size_t k = 0; k < 4; ++k) CHECK(s.model.user(i, k) == doctest::Approx(x(k)).epsilon(1e-9));
  }
}

TEST_CASE("item update is the exact minimizer with encoder targets") {
  std::mt19937_64 rng(4);
  const auto data = random_ratings(11, 9, 0.4, rng);
  auto s = make_state(11, 9, 3, rng);
  const RatingIndex index(data);
  const double before = complete_loss(s, data);
  update_items(s, index);
  CHECK(complete_loss(s, data) <= before);

  for (std::size_t j = 0; j < 9; ++j) {
    std::vector<std::vector<double>> rows;
    std::vector<double> rhs;
    const double sw = std::sqrt(s.weights[j]);
    for (const auto& e : index.col(j)) {
      std::vector<double> row(3);
      for (std::size_t k = 0; k < 3; ++k) row[k] = sw * s.model.user(e.other, k);
      rows.push_back(row);
      rhs.push_back(sw * e.value);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      std::vector<double> row(3, 0.0);
      row[k] = std::sqrt(s.model.lambda_v);
      rows.push_back(row);
      rhs.push_back(std::sqrt(s.model.lambda_v) * s.item_targets(j, k));
    }
    const auto x = least_squares(rows, rhs);
    for (std::size_t k = 0; k < 3; ++k) CHECK(s.model.item(j, k) == doctest::Approx(x(k)).epsilon(1e-9));
  }
}

TEST_CASE("an item without observations lands on its encoder target") {
  std::mt19937_64 rng(5);
  const RatingDataset data(3, 3, {{0, 0, 4.0}, {1, 1, 2.0}, {2, 0, 5.0}});
  auto s = make_state(3, 3, 2, rng);
  update_items(s, RatingIndex(data));
  CHECK(s.model.item(2, 0) == doctest::Approx(s.item_targets(2, 0)).epsilon(1e-14));
  CHECK(s.model.item(2, 1) == doctest::Approx(s.item_targets(2, 1)).epsilon(1e-14));
}

TEST_CASE("zero penalty on an unobserved user is a numerical error") {
  std::mt19937_64 rng(6);
  const RatingDataset data(2, 2, {{0, 0, 4.0}, {0, 1, 2.0}});
  auto s = make_state(2, 2, 2, rng);
  s.model.lambda_u = 0.0;
  CHECK_THROWS_AS(update_users(s, RatingIndex(data)), NumericalError);
}

TEST_CASE("updates are identical for any thread count") {
  std::mt19937_64 rng(7);
  const auto data = random_ratings(40, 25, 0.3, rng);
  const RatingIndex index(data);
  auto a = make_state(40, 25, 5, rng);
  auto b = a;
  update_users(a, index, 1);
  update_users(b, index, 3);
  update_items(a, index, 1);
  update_items(b, index, 3);
  CHECK(a.model.user == b.model.user);
  CHECK(a.model.item == b.model.item);
}

TEST_CASE("encoder block never raises its term and rolls back when it cannot descend") {
  std::mt19937_64 rng(8);
  const std::size_t n = 6, d = 3;
  std::vector<std::vector<std::uint32_t>> seqs(n, std::vector<std::uint32_t>(5));
  std::uniform_int_distribution<std::uint32_t> tok(1, 9);
  for (auto& sq : seqs) {
    for (auto& t : sq) t = tok(rng);
  }
  const Corpus corpus(5, 10, std::move(seqs));
  TrainState s = make_state(4, n, d, rng);
  s.item_encoder = EncoderParams::random({EncoderKind::kConv, 10, 4, 3, {3}, d}, 2);
  refresh_item_targets(s, corpus);
  s.encoder_learning_rate = 1e-2;

  const auto term = [&] {
    double t = 0.0;
    for (std::size_t j = 0; j < n; ++j) t += kernels::squared_distance(s.model.item.row(j), s.item_targets.row(j));
    return t;
  };
  double last = term();
  for (int block = 0; block < 10; ++block) {
    const auto r = update_item_encoder(s, corpus, 2);
    CHECK(r.accepted);
    CHECK(term() <= last);
    last = term();
  }

  const auto saved = *s.item_encoder;
  s.encoder_learning_rate = 1e9;
  const auto r = update_item_encoder(s, corpus, 1);
  CHECK(r.flagged);
  CHECK(r.halvings == 5);
  CHECK(s.encoder_flagged);
  CHECK(std::equal(saved.values().begin(), saved.values().end(), s.item_encoder->values().begin()));
}

TEST_CASE("mf training descends monotonically and fits low-rank data") {
  const auto syn = small_synthetic(11);
  TrainConfig cfg;
  cfg.dim = 3;
  cfg.lambda_u = 1.0;
  cfg.lambda_v = 1.0;
  cfg.seed = 4;
  const auto state = train(syn.observed, nullptr, cfg, Variant::kMf);
  CHECK(state.monotone);
  CHECK(state.sweeps >= 1);
  CHECK(state.sweeps <= cfg.max_sweeps);
  for (std::size_t k = 1; k < state.trace.size(); ++k) {
    CHECK(state.trace[k].train_loss <= state.trace[k - 1].train_loss * (1 + 1e-9));
  }
  double ss = 0.0;
  for (const auto& t : syn.observed.triples()) {
    const double e = t.value - predict(state.model, t.user, t.item);
    ss += e * e;
  }
  CHECK(std::sqrt(ss / syn.observed.size()) < 0.6);
}

TEST_CASE("training is deterministic and thread-count invariant") {
  const auto syn = small_synthetic(12);
  TrainConfig cfg;
  cfg.dim = 3;
  cfg.max_sweeps = 15;
  cfg.seed = 2;
  const auto a = train(syn.observed, nullptr, cfg, Variant::kMf);
  cfg.threads = 3;
  const auto b = train(syn.observed, nullptr, cfg, Variant::kMf);
  CHECK(a.model.user == b.model.user);
  CHECK(a.model.item == b.model.item);
  CHECK(a.sweeps == b.sweeps);
}

TEST_CASE("text variants need a corpus and train with one") {
  const auto syn = small_synthetic(13);
  TrainConfig cfg;
  cfg.dim = 3;
  cfg.max_sweeps = 8;
  CHECK_THROWS_AS(train(syn.observed, nullptr, cfg, Variant::kMfPlus), DataError);

  std::vector<std::size_t> groups(40);
  for (std::size_t j = 0; j < 40; ++j) groups[j] = j % 2;
  const auto docs = synthetic_documents(groups, 8, 10, 1);
  const auto corpus = encode_corpus(docs, build_vocabulary(docs, 100), 8);
  cfg.item_encoder.embed_dim = 4;
  cfg.item_encoder.filters = 3;
  cfg.sam_head.embed_dim = 4;
  cfg.sam_head.filters = 3;
  cfg.sam.max_iters = 20;
  for (auto v : {Variant::kMfPlus, Variant::kConvMf, Variant::kFtMfPlus}) {
    CAPTURE(to_string(v));
    const auto state = train(syn.observed, &corpus, cfg, v);
    CHECK(state.monotone);
    CHECK(state.item_encoder.has_value() == item_encoder_kind(v).has_value());
    for (double w : state.weights) CHECK(w >= 1.0);
    if (!uses_sam(v)) {
      for (double w : state.weights) CHECK(w == 1.0);
    }
  }
}

TEST_CASE("a prefit SAM model reproduces the fitted run") {
  const auto syn = small_synthetic(14);
  std::vector<std::size_t> groups(40);
  for (std::size_t j = 0; j < 40; ++j) groups[j] = j % 2;
  const auto docs = synthetic_documents(groups, 8, 10, 2);
  const auto corpus = encode_corpus(docs, build_vocabulary(docs, 100), 8);
  TrainConfig cfg;
  cfg.dim = 3;
  cfg.max_sweeps = 6;
  cfg.sam_head.embed_dim = 4;
  cfg.sam_head.filters = 3;
  cfg.sam.max_iters = 10;
  const auto fitted = train(syn.observed, &corpus, cfg, Variant::kMfPlus);
  const auto reused = train(syn.observed, &corpus, cfg, Variant::kMfPlus, &*fitted.sam);
  CHECK(reused.weights == fitted.weights);
  const auto a = reused.model.user.values(), b = fitted.model.user.values();
  CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  CHECK(std::isfinite(fitted.best_validation_rmse));
  cfg.validation_fraction = 0.0;
  CHECK(std::isnan(train(syn.observed, nullptr, cfg, Variant::kMf).best_validation_rmse));
  SamModel wrong;
  wrong.weights.assign(3, 1.0);
  CHECK_THROWS_AS(train(syn.observed, &corpus, cfg, Variant::kMfPlus, &wrong), UsageError);
}

TEST_CASE("oracle-weighted risk is unbiased for the full-matrix risk") {
  std::mt19937_64 rng(31);
  const std::size_t m = 50, n = 80;
  const double levels[] = {0.3, 0.5, 0.8};
  const auto prop = grouped_propensity(n, levels);
  FactorModel model;
  model.user = random_matrix(m, 3, rng);
  model.item = random_matrix(n, 3, rng);
  const auto base = generate_synthetic(m, n, 3, prop, 0.5, 1);

  double full = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double e = base.truth.full(i, j) - predict(model, i, j);
      full += e * e;
    }
  }
  std::vector<double> w(n);
  for (std::size_t j = 0; j < n; ++j) w[j] = 1.0 / prop.per_item_probability[j];

  std::bernoulli_distribution coin;
  double mean = 0.0;
  for (int draw = 0; draw < 200; ++draw) {
    std::vector<Rating> t;
    for (std::uint32_t i = 0; i < m; ++i) {
      for (std::uint32_t j = 0; j < n; ++j) {
        if (coin(rng, std::bernoulli_distribution::param_type(prop.per_item_probability[j]))) {
          t.push_back({i, j, base.truth.full(i, j)});
        }
      }
    }
    mean += weighted_risk(model, RatingDataset(m, n, std::move(t)), w) / 200.0;
  }
  CHECK(std::abs(mean - full) / full <= 0.05);
}

TEST_CASE("clipping and file round trips") {
  FactorModel model;
  model.user = Matrix(1, 1, 3.0);
  model.item = Matrix(1, 1, 2.0);
  TrainConfig cfg;
  CHECK(predict_clipped(model, 0, 0, cfg) == 6.0);
  cfg.clip_predictions = true;
  CHECK(predict_clipped(model, 0, 0, cfg) == 5.0);

  std::mt19937_64 rng(9);
  const auto m = random_matrix(4, 3, rng);
  const auto path = std::filesystem::temp_directory_path() / "debias_mf_matrix.csv";
  write_matrix_csv(m, path);
  CHECK(read_matrix_csv(path) == m);
}
