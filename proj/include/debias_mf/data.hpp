#pragma once

// Rating data: ingestion, sparse views, coverage-preserving splits,
// bi-scaling, and synthetic missing-not-at-random generation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias_mf/matrix.hpp"

namespace debias_mf {

struct Rating {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double value = 0.0;

  bool operator==(const Rating&) const = default;
};

// Observed ratings R_Omega over an m x n grid. Each (user, item) pair appears
// at most once. Optional raw ids map dense indices back to source ids.
class RatingDataset {
 public:
  RatingDataset() = default;
  // Throws DataError on out-of-range indices or duplicate pairs.
  RatingDataset(std::size_t num_users, std::size_t num_items,
                std::vector<Rating> triples);

  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t size() const { return triples_.size(); }
  bool empty() const { return triples_.empty(); }
  std::span<const Rating> triples() const { return triples_; }
  double density() const;

  // Raw ids, empty when the dataset was not loaded from an id-keyed file.
  const std::vector<std::int64_t>& user_ids() const { return user_ids_; }
  const std::vector<std::int64_t>& item_ids() const { return item_ids_; }
  void set_ids(std::vector<std::int64_t> user_ids,
               std::vector<std::int64_t> item_ids);

  // Same grid and ids, different triples.
  RatingDataset with_triples(std::vector<Rating> triples) const;

 private:
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::vector<Rating> triples_;
  std::vector<std::int64_t> user_ids_;
  std::vector<std::int64_t> item_ids_;
};

// Compressed row and column views of a dataset. Entry positions are sorted
// within each row / column. Values ride along for the factorization updates.
class RatingIndex {
 public:
  struct Entry {
    std::uint32_t other = 0;  // item for a row view, user for a column view
    double value = 0.0;
  };

  explicit RatingIndex(const RatingDataset& data);

  std::size_t rows() const { return row_offsets_.size() - 1; }
  std::size_t cols() const { return col_offsets_.size() - 1; }
  std::size_t nnz() const { return row_entries_.size(); }

  std::span<const Entry> row(std::size_t i) const {
    return {row_entries_.data() + row_offsets_[i],
            row_offsets_[i + 1] - row_offsets_[i]};
  }
  std::span<const Entry> col(std::size_t j) const {
    return {col_entries_.data() + col_offsets_[j],
            col_offsets_[j + 1] - col_offsets_[j]};
  }

 private:
  std::vector<std::size_t> row_offsets_;
  std::vector<Entry> row_entries_;
  std::vector<std::size_t> col_offsets_;
  std::vector<Entry> col_entries_;
};

// The indicator matrix I: I(i, j) = 1 iff (i, j) is observed.
class IndicatorView {
 public:
  IndicatorView(std::size_t rows, std::size_t cols) : IndicatorView(rows, cols, {}) {}
  explicit IndicatorView(const RatingDataset& data);
  // Pairs given as (row, col); duplicates are rejected.
  IndicatorView(std::size_t rows, std::size_t cols,
                std::vector<std::pair<std::uint32_t, std::uint32_t>> observed);

  std::size_t rows() const { return row_offsets_.size() - 1; }
  std::size_t cols() const { return col_offsets_.size() - 1; }
  std::size_t nnz() const { return row_cols_.size(); }

  std::span<const std::uint32_t> row(std::size_t i) const {
    return {row_cols_.data() + row_offsets_[i], row_offsets_[i + 1] - row_offsets_[i]};
  }
  std::span<const std::uint32_t> col(std::size_t j) const {
    return {col_rows_.data() + col_offsets_[j], col_offsets_[j + 1] - col_offsets_[j]};
  }
  bool contains(std::size_t i, std::size_t j) const;

 private:
  void build(std::vector<std::pair<std::uint32_t, std::uint32_t>> observed);

  std::vector<std::size_t> row_offsets_;
  std::vector<std::uint32_t> row_cols_;
  std::vector<std::size_t> col_offsets_;
  std::vector<std::uint32_t> col_rows_;
};

struct SplitPair {
  RatingDataset train;
  RatingDataset test;
  std::uint64_t seed = 0;
};

// Ground-truth observation probabilities P(I_ij = 1 | x_j), one per item.
struct PropensityGroundTruth {
  std::vector<double> per_item_probability;

  // Throws UsageError unless every entry lies in (0, 1].
  void validate() const;
};

enum class RatingFormat { kMl100k, kMl1m, kCsv };

RatingFormat parse_rating_format(const std::string& name);

struct IngestReport {
  std::size_t lines = 0;
  std::size_t duplicates = 0;        // later lines overwrote earlier ones
  std::size_t dropped_by_keep_list = 0;
};

// Reads MovieLens u.data (tab separated), ratings.dat ("::" separated) or the
// canonical "user,item,rating" CSV. Raw ids are re-indexed densely in
// ascending id order. Throws DataError with the offending line number on
// malformed input, and on an empty result.
RatingDataset load_ratings(const std::filesystem::path& path, RatingFormat format,
                           const std::optional<std::filesystem::path>& keep_list = {},
                           IngestReport* report = nullptr);

// One raw item id per line; blank lines and '#' comments are ignored.
std::vector<std::int64_t> read_keep_list(const std::filesystem::path& path);

// Writes "user,item,rating" with dense indices and 17 significant digits.
void write_ratings_csv(const RatingDataset& data, const std::filesystem::path& path);

// Reads the canonical CSV. Grid dimensions default to max index + 1 when not
// given.
RatingDataset read_ratings_csv(const std::filesystem::path& path,
                               std::optional<std::size_t> num_users = {},
                               std::optional<std::size_t> num_items = {});

// Throws DataError if a user or item has no triple.
void require_full_coverage(const RatingDataset& data);

// Random train/test partition in which every user and item keeps at least
// one training triple. train_fraction must lie in (0, 1).
SplitPair split(const RatingDataset& data, double train_fraction, std::uint64_t seed);

// Per-sweep affine parameters of alternating row/column standardization.
struct ScalingSweep {
  std::vector<double> row_mean, row_scale;
  std::vector<double> col_mean, col_scale;
};

struct ScalingRecord {
  std::vector<ScalingSweep> sweeps;
  std::vector<bool> clamped_rows;  // zero variance in some sweep, scale fixed to 1
  std::vector<bool> clamped_cols;
  bool converged = false;

  double forward(std::size_t i, std::size_t j, double value) const;
  double inverse(std::size_t i, std::size_t j, double value) const;
  RatingDataset invert(const RatingDataset& scaled) const;
};

struct BiscaleResult {
  RatingDataset data;
  ScalingRecord record;
};

// Alternating row-then-column standardization over observed entries until
// every sweep parameter is within tol of the identity (|mean| < tol and
// |scale - 1| < tol) or max_sweeps is reached.
BiscaleResult biscale(const RatingDataset& data, double tol, std::size_t max_sweeps);

struct TrueFactors {
  Matrix user;   // m x rank
  Matrix item;   // n x rank
  Matrix full;   // m x n, user * item^T + noise
};

struct SyntheticData {
  RatingDataset observed;
  TrueFactors truth;
  PropensityGroundTruth propensity;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;
};

// Draws rank-`rank` factors with standard normal entries, forms the full
// matrix plus Gaussian noise, and observes each entry of column j
// independently with probability per_item_probability[j]. A column with no
// observations is redrawn once; a second empty draw is a DataError.
SyntheticData generate_synthetic(std::size_t m, std::size_t n, std::size_t rank,
                                 const PropensityGroundTruth& propensity,
                                 double noise_sd, std::uint64_t seed);

// p_j = levels[j % levels.size()].
PropensityGroundTruth grouped_propensity(std::size_t n, std::span<const double> levels);

// One synthetic document per item: `length` tokens drawn from a shared filler
// vocabulary, with the item's group token "group<g>" at a random position.
// Observation propensity is tied to the group token, so the text carries the
// selection mechanism.
std::vector<std::string> synthetic_documents(std::span<const std::size_t> group_of_item,
                                             std::size_t length,
                                             std::size_t filler_vocabulary,
                                             std::uint64_t seed);

// Ratings CSV plus a JSON sidecar holding propensities, factors and seed.
void write_synthetic(const SyntheticData& data, const std::filesystem::path& csv_path,
                     const std::filesystem::path& json_path);

}  // namespace debias_mf
