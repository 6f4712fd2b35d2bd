#include "debias_mf/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "debias_mf/error.hpp"
#include "debias_mf/kernels.hpp"
#include "debias_mf/parallel.hpp"

namespace debias_mf {
namespace {

void check_indices(const FactorModel& model, std::size_t user, std::size_t item) {
  if (user >= model.user.rows() || item >= model.item.rows()) {
    throw UsageError("prediction index (" + std::to_string(user) + ", " + std::to_string(item) +
                     ") out of range");
  }
}

double data_term(const FactorModel& model, const RatingDataset& train,
                 std::span<const double> weights) {
  const auto& k = kernels::active();
  const std::size_t d = model.dim();
  double total = 0.0;
  for (const auto& t : train.triples()) {
    const double err =
        t.value - k.dot(model.user.row(t.user).data(), model.item.row(t.item).data(), d);
    total += (weights.empty() ? 1.0 : weights[t.item]) * err * err;
  }
  return total;
}

void check_model_shape(const FactorModel& model, const RatingDataset& data) {
  if (model.user.rows() != data.num_users() || model.item.rows() != data.num_items() ||
      model.user.cols() != model.item.cols()) {
    throw UsageError("factor model shape does not match the dataset");
  }
}

double rmse_on(const FactorModel& model, const RatingDataset& data, const TrainConfig& config) {
  double ss = 0.0;
  for (const auto& t : data.triples()) {
    const double err = t.value - predict_clipped(model, t.user, t.item, config);
    ss += err * err;
  }
  return std::sqrt(ss / static_cast<double>(data.size()));
}

double encoder_term(const TrainState& state) {
  const auto& v = state.model.item;
  double total = 0.0;
  for (std::size_t j = 0; j < v.rows(); ++j) {
    total += kernels::squared_distance(v.row(j), state.item_targets.row(j));
  }
  return state.model.lambda_v * total;
}

}  // namespace

double predict(const FactorModel& model, std::size_t user, std::size_t item) {
  check_indices(model, user, item);
  return kernels::dot(model.user.row(user), model.item.row(item));
}

double predict_clipped(const FactorModel& model, std::size_t user, std::size_t item,
                       const TrainConfig& config) {
  const double p = predict(model, user, item);
  return config.clip_predictions ? std::clamp(p, config.clip_min, config.clip_max) : p;
}

double regularized_squared_loss(const FactorModel& model, const RatingDataset& train) {
  check_model_shape(model, train);
  return data_term(model, train, {}) + model.lambda_u * kernels::squared_norm(model.user.values()) +
         model.lambda_v * kernels::squared_norm(model.item.values());
}

double weighted_risk(const FactorModel& model, const RatingDataset& train,
                     std::span<const double> weights) {
  check_model_shape(model, train);
  if (weights.size() != train.num_items()) throw UsageError("one weight per item is required");
  for (double w : weights) {
    if (!(w >= 1.0)) throw UsageError("bias-correcting weights must be at least 1");
  }
  return data_term(model, train, weights);
}

Variant parse_variant(const std::string& name) {
  if (name == "mf") return Variant::kMf;
  if (name == "mf_plus") return Variant::kMfPlus;
  if (name == "convmf") return Variant::kConvMf;
  if (name == "convmf_plus") return Variant::kConvMfPlus;
  if (name == "ftmf") return Variant::kFtMf;
  if (name == "ftmf_plus") return Variant::kFtMfPlus;
  throw UsageError("unknown variant '" + name +
                   "' (expected mf, mf_plus, convmf, convmf_plus, ftmf or ftmf_plus)");
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::kMf: return "mf";
    case Variant::kMfPlus: return "mf_plus";
    case Variant::kConvMf: return "convmf";
    case Variant::kConvMfPlus: return "convmf_plus";
    case Variant::kFtMf: return "ftmf";
    case Variant::kFtMfPlus: return "ftmf_plus";
  }
  return "?";
}

bool uses_sam(Variant variant) {
  return variant == Variant::kMfPlus || variant == Variant::kConvMfPlus ||
         variant == Variant::kFtMfPlus;
}

std::optional<EncoderKind> item_encoder_kind(Variant variant) {
  switch (variant) {
    case Variant::kConvMf:
    case Variant::kConvMfPlus: return EncoderKind::kConv;
    case Variant::kFtMf:
    case Variant::kFtMfPlus: return EncoderKind::kAverage;
    default: return std::nullopt;
  }
}

bool needs_corpus(Variant variant) {
  return uses_sam(variant) || item_encoder_kind(variant).has_value();
}

double complete_loss(const TrainState& state, const RatingDataset& train) {
  check_model_shape(state.model, train);
  const auto& m = state.model;
  return data_term(m, train, state.weights) + m.lambda_u * kernels::squared_norm(m.user.values()) +
         encoder_term(state);
}

void update_users(TrainState& state, const RatingIndex& index, int threads) {
  auto& model = state.model;
  const std::size_t d = model.dim();
  const auto& k = kernels::active();
  parallel_for(index.rows(), threads, [&](std::size_t i) {
    std::vector<double> a(d * d, 0.0), b(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) a[r * d + r] = model.lambda_u;
    for (const auto& e : index.row(i)) {
      const double w = state.weights[e.other];
      const double* v = model.item.row(e.other).data();
      k.rank1_update(w, v, a.data(), d);
      k.axpy(w * e.value, v, b.data(), d);
    }
    if (!cholesky_solve(a, b, d)) {
      throw NumericalError("singular user system for user " + std::to_string(i) +
                           "; use lambda_u > 0");
    }
    std::copy(b.begin(), b.end(), model.user.row(i).begin());
  });
}

void update_items(TrainState& state, const RatingIndex& index, int threads) {
  auto& model = state.model;
  const std::size_t d = model.dim();
  const auto& k = kernels::active();
  parallel_for(index.cols(), threads, [&](std::size_t j) {
    std::vector<double> a(d * d, 0.0), b(d, 0.0);
    const double w = state.weights[j];
    for (const auto& e : index.col(j)) {
      const double* u = model.user.row(e.other).data();
      k.rank1_update(w, u, a.data(), d);
      k.axpy(w * e.value, u, b.data(), d);
    }
    for (std::size_t r = 0; r < d; ++r) a[r * d + r] += model.lambda_v;
    k.axpy(model.lambda_v, state.item_targets.row(j).data(), b.data(), d);
    if (!cholesky_solve(a, b, d)) {
      throw NumericalError("singular item system for item " + std::to_string(j) +
                           "; use lambda_v > 0");
    }
    std::copy(b.begin(), b.end(), model.item.row(j).begin());
  });
}

void refresh_item_targets(TrainState& state, const Corpus& corpus, int threads) {
  if (!state.item_encoder) return;
  const auto& enc = *state.item_encoder;
  parallel_for(corpus.num_items(), threads, [&](std::size_t j) {
    const auto out = forward(enc, corpus.sequence(j));
    std::copy(out.value.begin(), out.value.end(), state.item_targets.row(j).begin());
  });
}

EncoderBlockResult update_item_encoder(TrainState& state, const Corpus& corpus,
                                       std::size_t steps, int threads) {
  if (!state.item_encoder) throw UsageError("state has no item encoder");
  EncoderBlockResult result;
  if (steps == 0) {
    result.accepted = true;
    return result;
  }
  const double before = encoder_term(state);
  const EncoderParams saved = *state.item_encoder;
  const Matrix saved_targets = state.item_targets;
  const std::size_t n = corpus.num_items();
  const std::size_t d = state.model.dim();
  const double lambda_v = state.model.lambda_v;

  for (std::size_t attempt = 0; attempt <= 5; ++attempt) {
    auto& enc = *state.item_encoder;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<EncoderOutput> outputs(n);
      parallel_for(n, threads, [&](std::size_t j) { outputs[j] = forward(enc, corpus.sequence(j)); });
      EncoderParams grad(enc.config());
      std::vector<double> upstream(d);
      for (std::size_t j = 0; j < n; ++j) {
        const auto v = state.model.item.row(j);
        for (std::size_t c = 0; c < d; ++c) upstream[c] = 2.0 * lambda_v * (outputs[j].value[c] - v[c]);
        backward_accumulate(enc, outputs[j], upstream, grad);
      }
      kernels::axpy(-state.encoder_learning_rate, grad.values(), enc.values());
    }
    refresh_item_targets(state, corpus, threads);
    const double after = encoder_term(state);
    if (std::isfinite(after) && after <= before) {
      result.accepted = true;
      return result;
    }
    if (attempt == 5) break;
    ++result.halvings;
    state.encoder_learning_rate *= 0.5;
    *state.item_encoder = saved;
    state.item_targets = saved_targets;
  }
  *state.item_encoder = saved;
  state.item_targets = saved_targets;
  result.flagged = true;
  state.encoder_flagged = true;
  return result;
}

TrainState train(const RatingDataset& train_data, const Corpus* corpus, const TrainConfig& config,
                 Variant variant, const SamModel* prefit_sam) {
  if (config.dim == 0) throw UsageError("latent dimension must be at least 1");
  if (config.lambda_u < 0.0 || config.lambda_v < 0.0) throw UsageError("lambdas must be >= 0");
  if (needs_corpus(variant) && corpus == nullptr) {
    throw DataError("variant " + to_string(variant) + " needs an item corpus (--corpus)");
  }
  if (corpus != nullptr && needs_corpus(variant) && corpus->num_items() != train_data.num_items()) {
    throw DataError("corpus has " + std::to_string(corpus->num_items()) + " items, dataset has " +
                    std::to_string(train_data.num_items()));
  }
  const std::size_t m = train_data.num_users(), n = train_data.num_items(), d = config.dim;

  RatingDataset fit_part = train_data;
  std::optional<RatingDataset> validation;
  if (config.validation_fraction > 0.0) {
    auto holdout = split(train_data, 1.0 - config.validation_fraction,
                         config.seed ^ 0x9e3779b97f4a7c15ULL);
    fit_part = std::move(holdout.train);
    if (!holdout.test.empty()) validation = std::move(holdout.test);
  }
  const RatingIndex index(fit_part);

  TrainState state;
  state.model.lambda_u = config.lambda_u;
  state.model.lambda_v = config.lambda_v;
  state.weights.assign(n, 1.0);
  state.item_targets = Matrix(n, d);
  state.encoder_learning_rate = config.encoder_learning_rate;

  if (uses_sam(variant) && prefit_sam != nullptr) {
    if (prefit_sam->weights.size() != n) throw UsageError("prefit SAM has the wrong item count");
    state.sam = *prefit_sam;
    state.weights = state.sam->weights;
  } else if (uses_sam(variant)) {
    EncoderConfig head_cfg = config.sam_head;
    head_cfg.vocab_size = corpus->vocab_size();
    head_cfg.output_dim = 1;
    auto head = EncoderParams::random(head_cfg, config.seed + 1);
    SamFitConfig sam_cfg = config.sam;
    sam_cfg.evaluation.threads = config.threads;
    state.sam = fit_sam(std::move(head), *corpus, IndicatorView(fit_part), sam_cfg);
    state.weights = state.sam->weights;
  }
  if (const auto kind = item_encoder_kind(variant)) {
    EncoderConfig enc_cfg = config.item_encoder;
    enc_cfg.kind = *kind;
    enc_cfg.vocab_size = corpus->vocab_size();
    enc_cfg.output_dim = d;
    state.item_encoder = EncoderParams::random(enc_cfg, config.seed + 2);
    refresh_item_targets(state, *corpus, config.threads);
  }

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> uniform(-config.init_scale, config.init_scale);
  state.model.user = Matrix(m, d);
  state.model.item = Matrix(n, d);
  for (auto& v : state.model.user.values()) v = uniform(rng);
  for (auto& v : state.model.item.values()) v = uniform(rng);

  double loss = complete_loss(state, fit_part);
  const auto record = [&](double next) {
    const double increase = (next - loss) / std::max(1.0, std::abs(loss));
    state.worst_increase = std::max(state.worst_increase, increase);
    if (increase > config.monotone_slack || !std::isfinite(next)) state.monotone = false;
    loss = next;
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  FactorModel best_model = state.model;
  std::optional<EncoderParams> best_encoder = state.item_encoder;
  Matrix best_targets = state.item_targets;

  for (std::size_t sweep = 1; sweep <= config.max_sweeps; ++sweep) {
    update_users(state, index, config.threads);
    record(complete_loss(state, fit_part));
    update_items(state, index, config.threads);
    record(complete_loss(state, fit_part));
    if (state.item_encoder) {
      update_item_encoder(state, *corpus, config.encoder_steps, config.threads);
      record(complete_loss(state, fit_part));
    }
    if (!std::isfinite(loss)) throw NumericalError("training loss became non-finite");
    state.sweeps = sweep;

    const double val = validation ? rmse_on(state.model, *validation, config)
                                  : std::numeric_limits<double>::quiet_NaN();
    state.trace.push_back({sweep, loss, val});
    const double score = validation ? val : loss;
    if (score < best) {
      best = score;
      since_best = 0;
      state.best_sweep = sweep;
      best_model = state.model;
      best_encoder = state.item_encoder;
      best_targets = state.item_targets;
    } else if (++since_best >= config.patience && validation) {
      state.early_stopped = true;
      break;
    }
  }
  state.best_validation_rmse = validation ? best : std::numeric_limits<double>::quiet_NaN();
  state.model = std::move(best_model);
  state.item_encoder = std::move(best_encoder);
  state.item_targets = std::move(best_targets);
  return state;
}

void write_matrix_csv(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream fields(line);
    std::string cell;
    while (std::getline(fields, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(rows.size() + 1) + ": bad number");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError(path.string() + ": ragged matrix");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path.string() + ": empty matrix");
  Matrix out(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), out.row(r).begin());
  return out;
}

void write_trace_csv(std::span<const LossTraceRow> trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sweep,train_loss,validation_rmse\n" << std::setprecision(17);
  for (const auto& row : trace) {
    out << row.sweep << ',' << row.train_loss << ',' << row.validation_rmse << '\n';
  }
}

}  // namespace debias_mf
