#include "debias_mf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string_view>
#include <unordered_set>

#include "json.hpp"

#include "debias_mf/error.hpp"

namespace debias_mf {
namespace {

std::string at_line(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line, RatingFormat format) {
  std::vector<std::string_view> out;
  if (format == RatingFormat::kMl1m) {
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find("::", start);
      out.push_back(trim(line.substr(start, pos - start)));
      if (pos == std::string_view::npos) break;
      start = pos + 2;
    }
  } else {
    const char sep = format == RatingFormat::kCsv ? ',' : '\t';
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find(sep, start);
      out.push_back(trim(line.substr(start, pos - start)));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    // u.data is nominally tab separated; tolerate runs of spaces too.
    if (format == RatingFormat::kMl100k && out.size() == 1) {
      out.clear();
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const std::size_t j = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > j) out.push_back(line.substr(j, i - j));
      }
    }
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

struct RawTriple {
  std::int64_t user;
  std::int64_t item;
  double value;
};

}  // namespace

RatingDataset::RatingDataset(std::size_t num_users, std::size_t num_items,
                             std::vector<Rating> triples)
    : num_users_(num_users), num_items_(num_items), triples_(std::move(triples)) {
  std::vector<std::uint64_t> keys;
  keys.reserve(triples_.size());
  for (const auto& t : triples_) {
    if (t.user >= num_users_ || t.item >= num_items_) {
      throw DataError("rating index (" + std::to_string(t.user) + ", " +
                      std::to_string(t.item) + ") outside " +
                      std::to_string(num_users_) + " x " + std::to_string(num_items_));
    }
    if (!std::isfinite(t.value)) throw DataError("non-finite rating value");
    keys.push_back((static_cast<std::uint64_t>(t.user) << 32) | t.item);
  }
  std::sort(keys.begin(), keys.end());
  if (std::adjacent_find(keys.begin(), keys.end()) != keys.end()) {
    throw DataError("duplicate (user, item) pair in rating triples");
  }
}

double RatingDataset::density() const {
  if (num_users_ == 0 || num_items_ == 0) return 0.0;
  return static_cast<double>(triples_.size()) /
         (static_cast<double>(num_users_) * static_cast<double>(num_items_));
}

void RatingDataset::set_ids(std::vector<std::int64_t> user_ids,
                            std::vector<std::int64_t> item_ids) {
  if ((!user_ids.empty() && user_ids.size() != num_users_) ||
      (!item_ids.empty() && item_ids.size() != num_items_)) {
    throw DataError("raw id table does not match dataset dimensions");
  }
  user_ids_ = std::move(user_ids);
  item_ids_ = std::move(item_ids);
}

RatingDataset RatingDataset::with_triples(std::vector<Rating> triples) const {
  RatingDataset out(num_users_, num_items_, std::move(triples));
  out.user_ids_ = user_ids_;
  out.item_ids_ = item_ids_;
  return out;
}

RatingIndex::RatingIndex(const RatingDataset& data)
    : row_offsets_(data.num_users() + 1, 0), col_offsets_(data.num_items() + 1, 0) {
  const auto triples = data.triples();
  for (const auto& t : triples) {
    ++row_offsets_[t.user + 1];
    ++col_offsets_[t.item + 1];
  }
  std::partial_sum(row_offsets_.begin(), row_offsets_.end(), row_offsets_.begin());
  std::partial_sum(col_offsets_.begin(), col_offsets_.end(), col_offsets_.begin());
  row_entries_.resize(triples.size());
  col_entries_.resize(triples.size());
  std::vector<std::size_t> row_fill(row_offsets_.begin(), row_offsets_.end() - 1);
  std::vector<std::size_t> col_fill(col_offsets_.begin(), col_offsets_.end() - 1);
  for (const auto& t : triples) {
    row_entries_[row_fill[t.user]++] = {t.item, t.value};
    col_entries_[col_fill[t.item]++] = {t.user, t.value};
  }
  const auto by_other = [](const Entry& a, const Entry& b) { return a.other < b.other; };
  for (std::size_t i = 0; i + 1 < row_offsets_.size(); ++i) {
    std::sort(row_entries_.begin() + row_offsets_[i], row_entries_.begin() + row_offsets_[i + 1],
              by_other);
  }
  for (std::size_t j = 0; j + 1 < col_offsets_.size(); ++j) {
    std::sort(col_entries_.begin() + col_offsets_[j], col_entries_.begin() + col_offsets_[j + 1],
              by_other);
  }
}

IndicatorView::IndicatorView(const RatingDataset& data)
    : row_offsets_(data.num_users() + 1, 0), col_offsets_(data.num_items() + 1, 0) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> observed;
  observed.reserve(data.size());
  for (const auto& t : data.triples()) observed.emplace_back(t.user, t.item);
  build(std::move(observed));
}

IndicatorView::IndicatorView(std::size_t rows, std::size_t cols,
                             std::vector<std::pair<std::uint32_t, std::uint32_t>> observed)
    : row_offsets_(rows + 1, 0), col_offsets_(cols + 1, 0) {
  for (const auto& [i, j] : observed) {
    if (i >= rows || j >= cols) throw DataError("indicator position out of range");
  }
  build(std::move(observed));
}

void IndicatorView::build(std::vector<std::pair<std::uint32_t, std::uint32_t>> observed) {
  std::sort(observed.begin(), observed.end());
  if (std::adjacent_find(observed.begin(), observed.end()) != observed.end()) {
    throw DataError("duplicate indicator position");
  }
  for (const auto& [i, j] : observed) {
    ++row_offsets_[i + 1];
    ++col_offsets_[j + 1];
  }
  std::partial_sum(row_offsets_.begin(), row_offsets_.end(), row_offsets_.begin());
  std::partial_sum(col_offsets_.begin(), col_offsets_.end(), col_offsets_.begin());
  row_cols_.resize(observed.size());
  col_rows_.resize(observed.size());
  std::vector<std::size_t> col_fill(col_offsets_.begin(), col_offsets_.end() - 1);
  // observed is sorted by (row, col), so both views come out sorted.
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const auto [i, j] = observed[k];
    row_cols_[k] = j;
    col_rows_[col_fill[j]++] = i;
  }
}

bool IndicatorView::contains(std::size_t i, std::size_t j) const {
  const auto r = row(i);
  return std::binary_search(r.begin(), r.end(), static_cast<std::uint32_t>(j));
}

void PropensityGroundTruth::validate() const {
  for (double p : per_item_probability) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw UsageError("propensities must lie in (0, 1]");
    }
  }
}

RatingFormat parse_rating_format(const std::string& name) {
  if (name == "ml100k") return RatingFormat::kMl100k;
  if (name == "ml1m") return RatingFormat::kMl1m;
  if (name == "csv") return RatingFormat::kCsv;
  throw UsageError("unknown rating format '" + name + "' (expected ml100k, ml1m or csv)");
}

std::vector<std::int64_t> read_keep_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open keep list " + path.string());
  std::vector<std::int64_t> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    std::int64_t id = 0;
    if (!parse_number(s, id)) throw DataError(at_line(path, line_no) + "expected an item id");
    ids.push_back(id);
  }
  return ids;
}

RatingDataset load_ratings(const std::filesystem::path& path, RatingFormat format,
                           const std::optional<std::filesystem::path>& keep_list,
                           IngestReport* report) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  IngestReport local;
  std::vector<RawTriple> raw;
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> position;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto s = trim(line);
    if (s.empty()) continue;
    const auto fields = split_fields(s, format);
    RawTriple t{};
    const bool ok = fields.size() >= 3 && parse_number(fields[0], t.user) &&
                    parse_number(fields[1], t.item) && parse_number(fields[2], t.value) &&
                    std::isfinite(t.value);
    if (!ok) {
      if (format == RatingFormat::kCsv && line_no == 1) continue;  // header row
      throw DataError(at_line(path, line_no) + "malformed rating line");
    }
    ++local.lines;
    const auto key = std::make_pair(t.user, t.item);
    if (auto it = position.find(key); it != position.end()) {
      raw[it->second] = t;
      ++local.duplicates;
    } else {
      position.emplace(key, raw.size());
      raw.push_back(t);
    }
  }

  if (keep_list) {
    const auto ids = read_keep_list(*keep_list);
    const std::unordered_set<std::int64_t> keep(ids.begin(), ids.end());
    const auto before = raw.size();
    std::erase_if(raw, [&](const RawTriple& t) { return !keep.contains(t.item); });
    local.dropped_by_keep_list = before - raw.size();
  }
  if (raw.empty()) throw DataError(path.string() + ": no ratings");

  std::set<std::int64_t> user_set, item_set;
  for (const auto& t : raw) {
    user_set.insert(t.user);
    item_set.insert(t.item);
  }
  std::vector<std::int64_t> user_ids(user_set.begin(), user_set.end());
  std::vector<std::int64_t> item_ids(item_set.begin(), item_set.end());
  const auto index_of = [](const std::vector<std::int64_t>& ids, std::int64_t id) {
    return static_cast<std::uint32_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };
  std::vector<Rating> triples;
  triples.reserve(raw.size());
  for (const auto& t : raw) {
    triples.push_back({index_of(user_ids, t.user), index_of(item_ids, t.item), t.value});
  }
  RatingDataset out(user_ids.size(), item_ids.size(), std::move(triples));
  out.set_ids(std::move(user_ids), std::move(item_ids));
  if (report != nullptr) *report = local;
  return out;
}

void write_ratings_csv(const RatingDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "user,item,rating\n" << std::setprecision(17);
  for (const auto& t : data.triples()) out << t.user << ',' << t.item << ',' << t.value << '\n';
}

RatingDataset read_ratings_csv(const std::filesystem::path& path,
                               std::optional<std::size_t> num_users,
                               std::optional<std::size_t> num_items) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Rating> triples;
  std::size_t max_user = 0, max_item = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto s = trim(line);
    if (s.empty()) continue;
    const auto fields = split_fields(s, RatingFormat::kCsv);
    Rating t{};
    const bool ok = fields.size() >= 3 && parse_number(fields[0], t.user) &&
                    parse_number(fields[1], t.item) && parse_number(fields[2], t.value);
    if (!ok) {
      if (line_no == 1) continue;
      throw DataError(at_line(path, line_no) + "malformed rating line");
    }
    max_user = std::max<std::size_t>(max_user, t.user);
    max_item = std::max<std::size_t>(max_item, t.item);
    triples.push_back(t);
  }
  if (triples.empty()) throw DataError(path.string() + ": no ratings");
  return RatingDataset(num_users.value_or(max_user + 1), num_items.value_or(max_item + 1),
                       std::move(triples));
}

void require_full_coverage(const RatingDataset& data) {
  std::vector<std::size_t> per_user(data.num_users(), 0), per_item(data.num_items(), 0);
  for (const auto& t : data.triples()) {
    ++per_user[t.user];
    ++per_item[t.item];
  }
  for (std::size_t i = 0; i < per_user.size(); ++i) {
    if (per_user[i] == 0) throw DataError("user " + std::to_string(i) + " has no ratings");
  }
  for (std::size_t j = 0; j < per_item.size(); ++j) {
    if (per_item[j] == 0) throw DataError("item " + std::to_string(j) + " has no ratings");
  }
}

SplitPair split(const RatingDataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("train fraction must lie strictly between 0 and 1");
  }
  require_full_coverage(data);

  const auto triples = data.triples();
  const std::size_t total = triples.size();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total)));
  std::vector<char> in_train(total, 0);
  std::vector<std::size_t> user_count(data.num_users(), 0), item_count(data.num_items(), 0);
  for (std::size_t k = 0; k < target; ++k) {
    const auto& t = triples[order[k]];
    in_train[order[k]] = 1;
    ++user_count[t.user];
    ++item_count[t.item];
  }

  // Coverage repair: one random held-out triple per uncovered user, then item.
  const auto repair = [&](bool by_user) {
    const std::size_t groups = by_user ? data.num_users() : data.num_items();
    auto& count = by_user ? user_count : item_count;
    std::vector<std::vector<std::size_t>> held(groups);
    for (std::size_t k = 0; k < total; ++k) {
      if (in_train[k]) continue;
      const auto g = by_user ? triples[k].user : triples[k].item;
      if (count[g] == 0) held[g].push_back(k);
    }
    for (std::size_t g = 0; g < groups; ++g) {
      if (count[g] != 0) continue;
      std::uniform_int_distribution<std::size_t> pick(0, held[g].size() - 1);
      const std::size_t k = held[g][pick(rng)];
      in_train[k] = 1;
      ++user_count[triples[k].user];
      ++item_count[triples[k].item];
    }
  };
  repair(true);
  repair(false);

  std::vector<Rating> train, test;
  train.reserve(target + data.num_users() + data.num_items());
  test.reserve(total - std::min(total, target));
  for (std::size_t k = 0; k < total; ++k) (in_train[k] ? train : test).push_back(triples[k]);
  return {data.with_triples(std::move(train)), data.with_triples(std::move(test)), seed};
}

double ScalingRecord::forward(std::size_t i, std::size_t j, double value) const {
  for (const auto& s : sweeps) {
    value = (value - s.row_mean[i]) / s.row_scale[i];
    value = (value - s.col_mean[j]) / s.col_scale[j];
  }
  return value;
}

double ScalingRecord::inverse(std::size_t i, std::size_t j, double value) const {
  for (auto it = sweeps.rbegin(); it != sweeps.rend(); ++it) {
    value = value * it->col_scale[j] + it->col_mean[j];
    value = value * it->row_scale[i] + it->row_mean[i];
  }
  return value;
}

RatingDataset ScalingRecord::invert(const RatingDataset& scaled) const {
  std::vector<Rating> out(scaled.triples().begin(), scaled.triples().end());
  for (auto& t : out) t.value = inverse(t.user, t.item, t.value);
  return scaled.with_triples(std::move(out));
}

BiscaleResult biscale(const RatingDataset& data, double tol, std::size_t max_sweeps) {
  require_full_coverage(data);
  const std::size_t m = data.num_users(), n = data.num_items();
  std::vector<Rating> values(data.triples().begin(), data.triples().end());
  std::vector<std::vector<std::size_t>> by_row(m), by_col(n);
  for (std::size_t k = 0; k < values.size(); ++k) {
    by_row[values[k].user].push_back(k);
    by_col[values[k].item].push_back(k);
  }

  ScalingRecord record;
  record.clamped_rows.assign(m, false);
  record.clamped_cols.assign(n, false);

  // Standardizes each group in place; returns the largest departure of its
  // parameters from the identity transform.
  const auto standardize = [&](const std::vector<std::vector<std::size_t>>& groups,
                               std::vector<double>& mean, std::vector<double>& scale,
                               std::vector<bool>& clamped) {
    mean.assign(groups.size(), 0.0);
    scale.assign(groups.size(), 1.0);
    double change = 0.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& members = groups[g];
      double sum = 0.0;
      for (auto k : members) sum += values[k].value;
      const double mu = sum / static_cast<double>(members.size());
      double ss = 0.0;
      for (auto k : members) ss += (values[k].value - mu) * (values[k].value - mu);
      double sd = std::sqrt(ss / static_cast<double>(members.size()));
      if (!(sd > 1e-12)) {
        sd = 1.0;
        clamped[g] = true;
      }
      mean[g] = mu;
      scale[g] = sd;
      for (auto k : members) values[k].value = (values[k].value - mu) / sd;
      change = std::max({change, std::abs(mu), std::abs(sd - 1.0)});
    }
    return change;
  };

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    ScalingSweep s;
    const double row_change = standardize(by_row, s.row_mean, s.row_scale, record.clamped_rows);
    const double col_change = standardize(by_col, s.col_mean, s.col_scale, record.clamped_cols);
    record.sweeps.push_back(std::move(s));
    if (std::max(row_change, col_change) < tol) {
      record.converged = true;
      break;
    }
  }
  return {data.with_triples(std::move(values)), std::move(record)};
}

SyntheticData generate_synthetic(std::size_t m, std::size_t n, std::size_t rank,
                                 const PropensityGroundTruth& propensity, double noise_sd,
                                 std::uint64_t seed) {
  if (m == 0 || n == 0 || rank == 0 || rank > std::min(m, n)) {
    throw UsageError("synthetic data needs 1 <= rank <= min(m, n)");
  }
  if (propensity.per_item_probability.size() != n) {
    throw UsageError("propensity vector length must equal the item count");
  }
  if (!(noise_sd >= 0.0)) throw UsageError("noise_sd must be non-negative");
  propensity.validate();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SyntheticData out;
  out.propensity = propensity;
  out.noise_sd = noise_sd;
  out.seed = seed;
  auto& truth = out.truth;
  truth.user = Matrix(m, rank);
  truth.item = Matrix(n, rank);
  for (auto& v : truth.user.values()) v = normal(rng);
  for (auto& v : truth.item.values()) v = normal(rng);
  truth.full = Matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double r = 0.0;
      for (std::size_t k = 0; k < rank; ++k) r += truth.user(i, k) * truth.item(j, k);
      truth.full(i, j) = r + noise_sd * normal(rng);
    }
  }

  const auto& p = propensity.per_item_probability;
  std::vector<char> observed(m * n, 0);
  std::vector<std::size_t> per_col(n, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (uniform(rng) < p[j]) {
        observed[i * n + j] = 1;
        ++per_col[j];
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (per_col[j] != 0) continue;
    for (std::size_t i = 0; i < m; ++i) {
      if (uniform(rng) < p[j]) {
        observed[i * n + j] = 1;
        ++per_col[j];
      }
    }
    if (per_col[j] == 0) {
      throw DataError("item " + std::to_string(j) + " drew no observations twice; propensity too small");
    }
  }

  std::vector<Rating> triples;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (observed[i * n + j]) {
        triples.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
                           truth.full(i, j)});
      }
    }
  }
  out.observed = RatingDataset(m, n, std::move(triples));
  return out;
}

PropensityGroundTruth grouped_propensity(std::size_t n, std::span<const double> levels) {
  if (levels.empty()) throw UsageError("need at least one propensity level");
  PropensityGroundTruth out;
  out.per_item_probability.resize(n);
  for (std::size_t j = 0; j < n; ++j) out.per_item_probability[j] = levels[j % levels.size()];
  out.validate();
  return out;
}

std::vector<std::string> synthetic_documents(std::span<const std::size_t> group_of_item,
                                             std::size_t length,
                                             std::size_t filler_vocabulary,
                                             std::uint64_t seed) {
  if (length == 0 || filler_vocabulary == 0) {
    throw UsageError("synthetic documents need a positive length and filler vocabulary");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> filler(0, filler_vocabulary - 1);
  std::uniform_int_distribution<std::size_t> slot(0, length - 1);
  std::vector<std::string> docs;
  docs.reserve(group_of_item.size());
  for (const std::size_t group : group_of_item) {
    const std::size_t group_pos = slot(rng);
    std::string doc;
    for (std::size_t t = 0; t < length; ++t) {
      if (t > 0) doc += ' ';
      if (t == group_pos) {
        doc += "group" + std::to_string(group);
      } else {
        doc += "w" + std::to_string(filler(rng));
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& csv_path,
                     const std::filesystem::path& json_path) {
  write_ratings_csv(data.observed, csv_path);
  const auto rows = [](const Matrix& mat) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t r = 0; r < mat.rows(); ++r) {
      const auto row = mat.row(r);
      out.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return out;
  };
  nlohmann::json j;
  j["num_users"] = data.observed.num_users();
  j["num_items"] = data.observed.num_items();
  j["rank"] = data.truth.user.cols();
  j["noise_sd"] = data.noise_sd;
  j["seed"] = data.seed;
  j["propensity"] = data.propensity.per_item_probability;
  j["user_factors"] = rows(data.truth.user);
  j["item_factors"] = rows(data.truth.item);
  std::ofstream out(json_path);
  if (!out) throw DataError("cannot write " + json_path.string());
  out << j.dump(2) << '\n';
}

}  // namespace debias_mf
