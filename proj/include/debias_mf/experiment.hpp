#pragma once

// Evaluation metrics and the experiment harness: overall RMSE tables over
// variants and seeds, and sparsity sweeps over train fractions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias_mf/data.hpp"
#include "debias_mf/factorization.hpp"
#include "debias_mf/textprep.hpp"

#include "json.hpp"

namespace debias_mf {

// Root mean squared error of predictions[k] against test.triples()[k].
// Throws DataError on an empty test set, UsageError on a length mismatch.
double rmse(std::span<const double> predictions, const RatingDataset& test);
double rmse(const FactorModel& model, const RatingDataset& test, const TrainConfig& config = {});

// (best_baseline - best_plus) / best_baseline in percent.
double improvement(double best_baseline, double best_plus);

enum class DatasetKind { kMl100k, kMl1m, kCsv, kSynthetic, kSyntheticReadingTime };

DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);

// What the test RMSE is measured against.
//   test_split: held-out observed triples.
//   full_matrix: every cell of the synthetic ground-truth matrix outside the
//                train split (synthetic datasets only).
enum class EvaluationTarget { kTestSplit, kFullMatrix };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kMl100k;
  std::filesystem::path path;
  std::optional<std::filesystem::path> keep_list;
  std::optional<std::filesystem::path> documents;
  std::size_t sequence_length = 300;
  std::size_t vocabulary_size = 8000;

  // Synthetic generation.
  std::size_t num_users = 1500;
  std::size_t num_items = 400;
  std::size_t rank = 5;
  double noise_sd = 0.5;
  std::vector<double> propensity_levels{0.1, 0.3, 0.6};
  std::size_t document_length = 20;
  std::size_t filler_vocabulary = 30;
  std::uint64_t data_seed = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<Variant> variants{Variant::kMf, Variant::kMfPlus};
  double train_fraction = 0.8;
  std::vector<double> fractions{0.2, 0.4, 0.6, 0.8};
  std::vector<std::uint64_t> seeds{1};
  TrainConfig train;
  EvaluationTarget evaluate_on = EvaluationTarget::kTestSplit;
  // When non-empty, every cell is trained once per value (lambda_u = lambda_v
  // = value) and the run with the lowest validation RMSE is kept.
  std::vector<double> lambda_grid;
  std::optional<std::filesystem::path> output_dir;

  // Throws UsageError on an empty seed list, a fraction outside (0, 1) or a
  // negative grid value.
  void validate() const;
};

// Parses a JSON experiment manifest; unknown keys are a UsageError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct LoadedDataset {
  RatingDataset data;
  std::optional<Corpus> corpus;
  std::optional<SyntheticData> synthetic;  // ground truth for synthetic kinds
  std::string label;
  std::vector<std::string> notes;
};

LoadedDataset load_dataset(const DatasetSpec& spec);

struct ResultRow {
  std::string variant;
  double fraction = 0.0;
  std::uint64_t seed = 0;
  double test_rmse = 0.0;
  std::size_t sweeps = 0;
  double lambda_u = 0.0;
  double lambda_v = 0.0;
  double seconds = 0.0;          // wall time; kept out of results.csv
  double train_density = 0.0;    // |train| / (m n)
  double nominal_density = 0.0;  // fraction * density of the full dataset
  bool monotone = true;
  double worst_increase = 0.0;
  bool dropped = false;          // split could not keep coverage
  std::string note;
};

struct SummaryRow {
  std::string variant;
  double fraction = 0.0;
  double median_rmse = 0.0;
  std::size_t runs = 0;
};

struct ImproveRow {
  double fraction = 0.0;
  std::string best_baseline;
  double baseline_rmse = 0.0;
  std::string best_plus;
  double plus_rmse = 0.0;
  double percent = 0.0;
};

struct ExperimentTable {
  std::string dataset_label;
  double dataset_density = 0.0;
  std::vector<ResultRow> rows;
  std::vector<SummaryRow> summary;  // medians over seeds, dropped runs excluded
  std::vector<ImproveRow> improve;  // one per fraction with both kinds present
  std::vector<std::string> warnings;
};

// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> values);

// Trains and evaluates one (variant, fraction, seed) cell.
ResultRow run_cell(const LoadedDataset& loaded, const ExperimentConfig& config, Variant variant,
                   double fraction, std::uint64_t seed);

// Every variant and seed at config.train_fraction.
ExperimentTable run_table2(const ExperimentConfig& config);
ExperimentTable run_table2(const ExperimentConfig& config, const LoadedDataset& loaded);

// Every variant and seed at each of config.fractions.
ExperimentTable run_sparsity_sweep(const ExperimentConfig& config);
ExperimentTable run_sparsity_sweep(const ExperimentConfig& config, const LoadedDataset& loaded);

// results.csv, summary.csv, improve.csv, table.txt and timings.csv under dir.
void write_experiment(const ExperimentTable& table, const std::filesystem::path& dir);
std::string render_table(const ExperimentTable& table);

}  // namespace debias_mf
