#pragma once

// Weighted matrix factorization with an optional document-encoder prior on the
// item factors, trained by alternating exact ridge solves for U and V and
// gradient blocks for the encoder.
//
//   loss = sum_{(i,j) observed} w_j (r_ij - u_i.v_j)^2
//        + lambda_u sum_i |u_i|^2 + lambda_v sum_j |v_j - s_j|^2
//
// where s_j is the item encoder's output for item j's document (zero when
// there is no encoder) and w_j are per-item weights (one when there is no
// SAM fit).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias_mf/data.hpp"
#include "debias_mf/encoder.hpp"
#include "debias_mf/matrix.hpp"
#include "debias_mf/sam.hpp"
#include "debias_mf/textprep.hpp"

namespace debias_mf {

struct FactorModel {
  Matrix user;  // m x d
  Matrix item;  // n x d
  double lambda_u = 0.0;
  double lambda_v = 0.0;

  std::size_t dim() const { return user.cols(); }
};

// u_i . v_j; throws UsageError for an index out of range.
double predict(const FactorModel& model, std::size_t user, std::size_t item);

// Squared error over observed triples plus plain L2 penalties on U and V.
double regularized_squared_loss(const FactorModel& model, const RatingDataset& train);

// sum over observed triples of w_j (r_ij - u_i.v_j)^2. Throws UsageError if
// any weight is below 1 or the length is wrong.
double weighted_risk(const FactorModel& model, const RatingDataset& train,
                     std::span<const double> weights);

enum class Variant { kMf, kMfPlus, kConvMf, kConvMfPlus, kFtMf, kFtMfPlus };

Variant parse_variant(const std::string& name);
std::string to_string(Variant variant);
bool uses_sam(Variant variant);
std::optional<EncoderKind> item_encoder_kind(Variant variant);
bool needs_corpus(Variant variant);

struct TrainConfig {
  std::size_t dim = 50;
  double lambda_u = 100.0;
  double lambda_v = 10.0;
  std::size_t max_sweeps = 200;
  std::size_t patience = 5;
  double validation_fraction = 0.1;  // 0 disables early stopping
  std::uint64_t seed = 0;
  double init_scale = 0.05;

  // Item document encoder (convmf / ftmf variants). kind and output_dim are
  // set from the variant and dim.
  EncoderConfig item_encoder{EncoderKind::kConv, 0, 50, 50, {3, 4, 5}, 50};
  std::size_t encoder_steps = 1;  // gradient steps per sweep
  double encoder_learning_rate = 1e-3;

  // SAM weight head (+ variants). output_dim is forced to 1.
  EncoderConfig sam_head{EncoderKind::kConv, 0, 50, 50, {3, 4, 5}, 1};
  SamFitConfig sam;

  int threads = 1;
  bool clip_predictions = false;
  double clip_min = 1.0;
  double clip_max = 5.0;
  double monotone_slack = 1e-9;  // relative to max(1, |loss|)
};

struct LossTraceRow {
  std::size_t sweep = 0;
  double train_loss = 0.0;
  double validation_rmse = 0.0;  // NaN when there is no validation set
};

struct TrainState {
  FactorModel model;
  std::vector<double> weights;          // per item; all ones without SAM
  std::optional<EncoderParams> item_encoder;
  Matrix item_targets;                  // n x d encoder outputs s_j; zeros without encoder
  std::optional<SamModel> sam;
  std::vector<LossTraceRow> trace;
  double encoder_learning_rate = 0.0;
  bool encoder_flagged = false;         // a block was rolled back 5 times
  bool monotone = true;                 // no update raised the loss beyond slack
  double worst_increase = 0.0;          // largest relative loss increase seen
  std::size_t sweeps = 0;
  std::size_t best_sweep = 0;
  double best_validation_rmse = 0.0;    // NaN when there is no validation set
  bool early_stopped = false;
};

// Full objective above for the state's model, weights and targets.
double complete_loss(const TrainState& state, const RatingDataset& train);

// Exact minimizer over U with V fixed:
//   u_i = (sum_j w_j v_j v_j^T + lambda_u I)^-1 sum_j w_j r_ij v_j.
// Throws NumericalError if a system is singular (lambda_u = 0 with
// degenerate v's).
void update_users(TrainState& state, const RatingIndex& index, int threads = 1);

// Exact minimizer over V with U and s fixed:
//   v_j = (w_j sum_i u_i u_i^T + lambda_v I)^-1 (w_j sum_i r_ij u_i + lambda_v s_j).
void update_items(TrainState& state, const RatingIndex& index, int threads = 1);

// Recomputes item_targets from the item encoder.
void refresh_item_targets(TrainState& state, const Corpus& corpus, int threads = 1);

struct EncoderBlockResult {
  bool accepted = false;
  std::size_t halvings = 0;
  bool flagged = false;
};

// `steps` full-batch gradient steps on lambda_v sum_j |v_j - dl(x_j)|^2. The
// block is kept only if that term did not increase; otherwise it is rolled
// back and retried at half the learning rate, up to five times.
EncoderBlockResult update_item_encoder(TrainState& state, const Corpus& corpus,
                                       std::size_t steps, int threads = 1);

// Fits a variant on `train`. `corpus` is required for every variant except
// mf; a missing corpus is a DataError. `prefit_sam` skips the SAM fit for +
// variants; it must come from an earlier call with the same data, seed and
// SAM settings, since the fit does not depend on the lambdas.
TrainState train(const RatingDataset& train, const Corpus* corpus, const TrainConfig& config,
                 Variant variant, const SamModel* prefit_sam = nullptr);

// Prediction, clipped to [clip_min, clip_max] when enabled.
double predict_clipped(const FactorModel& model, std::size_t user, std::size_t item,
                       const TrainConfig& config);

void write_matrix_csv(const Matrix& m, const std::filesystem::path& path);
Matrix read_matrix_csv(const std::filesystem::path& path);
void write_trace_csv(std::span<const LossTraceRow> trace, const std::filesystem::path& path);

}  // namespace debias_mf
