#include "debias_mf/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "debias_mf/error.hpp"
#include "debias_mf/kernels.hpp"

namespace debias_mf {

double rmse(std::span<const double> predictions, const RatingDataset& test) {
  if (test.empty()) throw DataError("RMSE needs a non-empty test set");
  if (predictions.size() != test.size()) {
    throw UsageError("prediction count does not match the test set");
  }
  double ss = 0.0;
  const auto triples = test.triples();
  for (std::size_t k = 0; k < triples.size(); ++k) {
    const double err = triples[k].value - predictions[k];
    ss += err * err;
  }
  return std::sqrt(ss / static_cast<double>(triples.size()));
}

double rmse(const FactorModel& model, const RatingDataset& test, const TrainConfig& config) {
  std::vector<double> predictions;
  predictions.reserve(test.size());
  for (const auto& t : test.triples()) predictions.push_back(predict_clipped(model, t.user, t.item, config));
  return rmse(predictions, test);
}

double improvement(double best_baseline, double best_plus) {
  return (best_baseline - best_plus) / best_baseline * 100.0;
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "ml100k") return DatasetKind::kMl100k;
  if (name == "ml1m") return DatasetKind::kMl1m;
  if (name == "csv") return DatasetKind::kCsv;
  if (name == "synthetic") return DatasetKind::kSynthetic;
  if (name == "synthetic_reading_time") return DatasetKind::kSyntheticReadingTime;
  throw UsageError("unknown dataset kind '" + name +
                   "' (expected ml100k, ml1m, csv, synthetic or synthetic_reading_time)");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kMl100k: return "ml100k";
    case DatasetKind::kMl1m: return "ml1m";
    case DatasetKind::kCsv: return "csv";
    case DatasetKind::kSynthetic: return "synthetic";
    case DatasetKind::kSyntheticReadingTime: return "synthetic_reading_time";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw UsageError("at least one seed is required");
  if (variants.empty()) throw UsageError("at least one variant is required");
  const auto check = [](double f) {
    if (!(f > 0.0 && f < 1.0)) throw UsageError("fractions must lie in (0, 1)");
  };
  check(train_fraction);
  for (double f : fractions) check(f);
  for (double l : lambda_grid) {
    if (!(l >= 0.0)) throw UsageError("lambda_grid values must be >= 0");
  }
}

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw UsageError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) ==
        keys.end()) {
      throw UsageError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

DatasetSpec dataset_from_json(const json& j) {
  reject_unknown(j,
                 {"kind", "path", "keep_list", "documents", "sequence_length", "vocabulary_size",
                  "num_users", "num_items", "rank", "noise_sd", "propensity_levels",
                  "document_length", "filler_vocabulary", "data_seed"},
                 "dataset");
  DatasetSpec spec;
  if (j.contains("kind")) spec.kind = parse_dataset_kind(j.at("kind").get<std::string>());
  if (j.contains("path")) spec.path = j.at("path").get<std::string>();
  if (j.contains("keep_list")) spec.keep_list = j.at("keep_list").get<std::string>();
  if (j.contains("documents")) spec.documents = j.at("documents").get<std::string>();
  read_key(j, "sequence_length", spec.sequence_length);
  read_key(j, "vocabulary_size", spec.vocabulary_size);
  read_key(j, "num_users", spec.num_users);
  read_key(j, "num_items", spec.num_items);
  read_key(j, "rank", spec.rank);
  read_key(j, "noise_sd", spec.noise_sd);
  read_key(j, "propensity_levels", spec.propensity_levels);
  read_key(j, "document_length", spec.document_length);
  read_key(j, "filler_vocabulary", spec.filler_vocabulary);
  read_key(j, "data_seed", spec.data_seed);
  return spec;
}

void train_from_json(const json& j, TrainConfig& t) {
  reject_unknown(j,
                 {"dim", "lambda_u", "lambda_v", "max_sweeps", "patience", "validation_fraction",
                  "init_scale", "encoder_steps", "encoder_learning_rate", "embed_dim", "filters",
                  "windows", "threads", "clip_predictions", "objective", "sam_learning_rate",
                  "sam_max_iters", "sam_tol"},
                 "train");
  read_key(j, "dim", t.dim);
  read_key(j, "lambda_u", t.lambda_u);
  read_key(j, "lambda_v", t.lambda_v);
  read_key(j, "max_sweeps", t.max_sweeps);
  read_key(j, "patience", t.patience);
  read_key(j, "validation_fraction", t.validation_fraction);
  read_key(j, "init_scale", t.init_scale);
  read_key(j, "encoder_steps", t.encoder_steps);
  read_key(j, "encoder_learning_rate", t.encoder_learning_rate);
  if (j.contains("embed_dim")) t.item_encoder.embed_dim = t.sam_head.embed_dim = j.at("embed_dim");
  if (j.contains("filters")) t.item_encoder.filters = t.sam_head.filters = j.at("filters");
  if (j.contains("windows")) {
    t.item_encoder.windows = t.sam_head.windows = j.at("windows").get<std::vector<std::size_t>>();
  }
  read_key(j, "threads", t.threads);
  read_key(j, "clip_predictions", t.clip_predictions);
  if (j.contains("objective")) {
    t.sam.evaluation.objective = parse_sam_objective(j.at("objective").get<std::string>());
  }
  read_key(j, "sam_learning_rate", t.sam.learning_rate);
  read_key(j, "sam_max_iters", t.sam.max_iters);
  read_key(j, "sam_tol", t.sam.tol);
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown(j,
                 {"dataset", "variants", "train_fraction", "fractions", "seeds", "train",
                  "evaluate_on", "output_dir", "lambda_grid"},
                 "experiment config");
  ExperimentConfig config;
  try {
    if (j.contains("dataset")) config.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("variants")) {
      config.variants.clear();
      for (const auto& v : j.at("variants")) config.variants.push_back(parse_variant(v.get<std::string>()));
    }
    read_key(j, "train_fraction", config.train_fraction);
    read_key(j, "fractions", config.fractions);
    read_key(j, "seeds", config.seeds);
    read_key(j, "lambda_grid", config.lambda_grid);
    if (j.contains("train")) train_from_json(j.at("train"), config.train);
    if (j.contains("evaluate_on")) {
      const auto target = j.at("evaluate_on").get<std::string>();
      if (target == "test_split") {
        config.evaluate_on = EvaluationTarget::kTestSplit;
      } else if (target == "full_matrix") {
        config.evaluate_on = EvaluationTarget::kFullMatrix;
      } else {
        throw UsageError("evaluate_on must be test_split or full_matrix");
      }
    }
    if (j.contains("output_dir")) config.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad experiment config: ") + e.what());
  }
  config.validate();
  return config;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

LoadedDataset load_dataset(const DatasetSpec& spec) {
  LoadedDataset out;
  out.label = to_string(spec.kind);
  if (spec.kind == DatasetKind::kSynthetic || spec.kind == DatasetKind::kSyntheticReadingTime) {
    const auto propensity = grouped_propensity(spec.num_items, spec.propensity_levels);
    auto synthetic = generate_synthetic(spec.num_users, spec.num_items, spec.rank, propensity,
                                        spec.noise_sd, spec.data_seed);
    std::vector<std::size_t> groups(spec.num_items);
    for (std::size_t j = 0; j < groups.size(); ++j) groups[j] = j % spec.propensity_levels.size();
    const auto docs = synthetic_documents(groups, spec.document_length, spec.filler_vocabulary,
                                          spec.data_seed + 1);
    const auto vocab = build_vocabulary(docs, spec.vocabulary_size);
    out.corpus = encode_corpus(docs, vocab, spec.document_length);
    if (spec.kind == DatasetKind::kSynthetic) {
      out.data = synthetic.observed;
      out.synthetic = std::move(synthetic);
    } else {
      // Positive, right-skewed durations, then bi-scaled like reading-time logs.
      std::vector<Rating> triples(synthetic.observed.triples().begin(),
                                  synthetic.observed.triples().end());
      for (auto& t : triples) t.value = std::exp(0.5 + 0.25 * t.value);
      auto scaled = biscale(synthetic.observed.with_triples(std::move(triples)), 1e-6, 100);
      out.data = std::move(scaled.data);
      out.label += " (stand-in for reading-time data)";
      if (!scaled.record.converged) out.notes.push_back("bi-scaling did not converge in 100 sweeps");
    }
    return out;
  }

  const RatingFormat format = spec.kind == DatasetKind::kMl100k ? RatingFormat::kMl100k
                              : spec.kind == DatasetKind::kMl1m ? RatingFormat::kMl1m
                                                                : RatingFormat::kCsv;
  IngestReport report;
  out.data = load_ratings(spec.path, format, spec.keep_list, &report);
  if (report.duplicates > 0) {
    out.notes.push_back(std::to_string(report.duplicates) + " duplicate ratings overwritten");
  }
  if (spec.documents) {
    std::size_t missing = 0;
    const auto docs = align_documents(out.data, read_documents(*spec.documents), &missing);
    const auto vocab = build_vocabulary(docs, spec.vocabulary_size);
    out.corpus = encode_corpus(docs, vocab, spec.sequence_length);
    if (missing > 0) out.notes.push_back(std::to_string(missing) + " items have no document");
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw UsageError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

namespace {

double full_matrix_rmse(const FactorModel& model, const SyntheticData& truth,
                        const RatingDataset& train, const TrainConfig& config) {
  const std::size_t m = train.num_users(), n = train.num_items();
  std::vector<char> in_train(m * n, 0);
  for (const auto& t : train.triples()) in_train[t.user * n + t.item] = 1;
  double ss = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (in_train[i * n + j]) continue;
      const double err = truth.truth.full(i, j) - predict_clipped(model, i, j, config);
      ss += err * err;
      ++count;
    }
  }
  if (count == 0) throw DataError("no cells outside the train split");
  return std::sqrt(ss / static_cast<double>(count));
}

void summarize(ExperimentTable& table, const ExperimentConfig& config) {
  std::map<std::pair<double, std::string>, std::vector<double>> groups;
  for (const auto& row : table.rows) {
    if (!row.dropped) groups[{row.fraction, row.variant}].push_back(row.test_rmse);
  }
  std::set<double> fractions;
  for (const auto& [key, values] : groups) fractions.insert(key.first);
  for (double f : fractions) {
    for (const auto variant : config.variants) {
      const auto it = groups.find({f, to_string(variant)});
      if (it == groups.end()) continue;
      table.summary.push_back({to_string(variant), f, median(it->second), it->second.size()});
    }
    ImproveRow imp;
    imp.fraction = f;
    bool have_base = false, have_plus = false;
    for (const auto& s : table.summary) {
      if (s.fraction != f) continue;
      const bool plus = uses_sam(parse_variant(s.variant));
      if (plus && (!have_plus || s.median_rmse < imp.plus_rmse)) {
        imp.best_plus = s.variant;
        imp.plus_rmse = s.median_rmse;
        have_plus = true;
      } else if (!plus && (!have_base || s.median_rmse < imp.baseline_rmse)) {
        imp.best_baseline = s.variant;
        imp.baseline_rmse = s.median_rmse;
        have_base = true;
      }
    }
    if (have_base && have_plus) {
      imp.percent = improvement(imp.baseline_rmse, imp.plus_rmse);
      table.improve.push_back(imp);
    }
  }
}

ExperimentTable run_fractions(const ExperimentConfig& config, const LoadedDataset& loaded,
                              std::span<const double> fractions) {
  config.validate();
  ExperimentTable table;
  table.dataset_label = loaded.label;
  table.dataset_density = loaded.data.density();
  table.warnings = loaded.notes;
  std::vector<Variant> runnable;
  for (const auto variant : config.variants) {
    if (needs_corpus(variant) && !loaded.corpus) {
      table.warnings.push_back("skipping " + to_string(variant) + ": no item corpus supplied");
    } else {
      runnable.push_back(variant);
    }
  }
  for (double fraction : fractions) {
    for (const auto variant : runnable) {
      for (const auto seed : config.seeds) {
        table.rows.push_back(run_cell(loaded, config, variant, fraction, seed));
        const auto& row = table.rows.back();
        if (row.dropped) table.warnings.push_back(row.note);
        if (!row.monotone) {
          table.warnings.push_back(row.variant + " seed " + std::to_string(seed) +
                                   ": loss increased beyond slack during training");
        }
      }
    }
  }
  summarize(table, config);
  return table;
}

std::string fmt(double value, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << value;
  return s.str();
}

}  // namespace

ResultRow run_cell(const LoadedDataset& loaded, const ExperimentConfig& config, Variant variant,
                   double fraction, std::uint64_t seed) {
  ResultRow row;
  row.variant = to_string(variant);
  row.fraction = fraction;
  row.seed = seed;
  row.nominal_density = fraction * loaded.data.density();
  SplitPair parts;
  try {
    parts = split(loaded.data, fraction, seed);
  } catch (const DataError& e) {
    row.dropped = true;
    row.note = "dropped " + row.variant + " fraction " + fmt(fraction, 2) + " seed " +
               std::to_string(seed) + ": " + e.what();
    return row;
  }
  row.train_density = parts.train.density();

  TrainConfig train_config = config.train;
  train_config.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  const Corpus* corpus = loaded.corpus ? &*loaded.corpus : nullptr;
  std::optional<TrainState> state;
  bool monotone = true;
  double worst_increase = 0.0;
  if (config.lambda_grid.empty()) {
    state = train(parts.train, corpus, train_config, variant);
    monotone = state->monotone;
    worst_increase = state->worst_increase;
  } else {
    std::optional<SamModel> sam;
    for (double lambda : config.lambda_grid) {
      train_config.lambda_u = train_config.lambda_v = lambda;
      auto candidate = train(parts.train, corpus, train_config, variant, sam ? &*sam : nullptr);
      if (!sam && candidate.sam) sam = candidate.sam;
      monotone = monotone && candidate.monotone;
      worst_increase = std::max(worst_increase, candidate.worst_increase);
      // NaN scores (no validation set) never win, so the first grid value stays.
      if (!state || candidate.best_validation_rmse < state->best_validation_rmse) {
        state = std::move(candidate);
      }
    }
  }
  if (config.evaluate_on == EvaluationTarget::kFullMatrix) {
    if (!loaded.synthetic) throw UsageError("full_matrix evaluation needs a synthetic dataset");
    row.test_rmse = full_matrix_rmse(state->model, *loaded.synthetic, parts.train, train_config);
  } else {
    row.test_rmse = rmse(state->model, parts.test, train_config);
  }
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  row.sweeps = state->sweeps;
  row.lambda_u = state->model.lambda_u;
  row.lambda_v = state->model.lambda_v;
  row.monotone = monotone;  // over every grid run
  row.worst_increase = worst_increase;
  return row;
}

ExperimentTable run_table2(const ExperimentConfig& config) {
  return run_table2(config, load_dataset(config.dataset));
}

ExperimentTable run_table2(const ExperimentConfig& config, const LoadedDataset& loaded) {
  const double fraction[] = {config.train_fraction};
  return run_fractions(config, loaded, fraction);
}

ExperimentTable run_sparsity_sweep(const ExperimentConfig& config) {
  return run_sparsity_sweep(config, load_dataset(config.dataset));
}

ExperimentTable run_sparsity_sweep(const ExperimentConfig& config, const LoadedDataset& loaded) {
  if (config.fractions.empty()) throw UsageError("a sparsity sweep needs at least one fraction");
  return run_fractions(config, loaded, config.fractions);
}

std::string render_table(const ExperimentTable& table) {
  std::ostringstream out;
  out << "dataset: " << table.dataset_label << "  density " << fmt(100.0 * table.dataset_density, 3)
      << "%\n";
  std::set<double> fractions;
  std::vector<std::string> variants;
  for (const auto& s : table.summary) {
    fractions.insert(s.fraction);
    if (std::find(variants.begin(), variants.end(), s.variant) == variants.end()) {
      variants.push_back(s.variant);
    }
  }
  out << std::left << std::setw(14) << "variant";
  for (double f : fractions) {
    out << std::right << std::setw(18)
        << (fmt(100.0 * f, 0) + "% (" + fmt(100.0 * f * table.dataset_density, 2) + "%)");
  }
  out << '\n';
  for (const auto& v : variants) {
    out << std::left << std::setw(14) << v;
    for (double f : fractions) {
      const auto it = std::find_if(table.summary.begin(), table.summary.end(),
                                   [&](const SummaryRow& s) { return s.variant == v && s.fraction == f; });
      out << std::right << std::setw(18) << (it == table.summary.end() ? "-" : fmt(it->median_rmse, 4));
    }
    out << '\n';
  }
  if (!table.improve.empty()) {
    out << std::left << std::setw(14) << "Improve";
    for (double f : fractions) {
      const auto it = std::find_if(table.improve.begin(), table.improve.end(),
                                   [&](const ImproveRow& r) { return r.fraction == f; });
      out << std::right << std::setw(18) << (it == table.improve.end() ? "-" : fmt(it->percent, 2) + "%");
    }
    out << '\n';
  }
  for (const auto& w : table.warnings) out << "warning: " << w << '\n';
  return out.str();
}

void write_experiment(const ExperimentTable& table, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw DataError("cannot write " + (dir / name).string());
    f << std::setprecision(17);
    return f;
  };
  {
    auto f = open("results.csv");
    f << "variant,fraction,seed,test_rmse,sweeps,lambda_u,lambda_v,train_density,nominal_density,monotone,"
         "worst_increase,dropped\n";
    for (const auto& r : table.rows) {
      f << r.variant << ',' << r.fraction << ',' << r.seed << ',' << r.test_rmse << ',' << r.sweeps
        << ',' << r.lambda_u << ',' << r.lambda_v << ',' << r.train_density << ',' << r.nominal_density << ',' << r.monotone << ','
        << r.worst_increase << ',' << r.dropped << '\n';
    }
  }
  {
    auto f = open("summary.csv");
    f << "variant,fraction,median_rmse,runs\n";
    for (const auto& s : table.summary) {
      f << s.variant << ',' << s.fraction << ',' << s.median_rmse << ',' << s.runs << '\n';
    }
  }
  {
    auto f = open("improve.csv");
    f << "fraction,nominal_density,best_baseline,baseline_rmse,best_plus,plus_rmse,improve_percent\n";
    for (const auto& r : table.improve) {
      f << r.fraction << ',' << r.fraction * table.dataset_density << ',' << r.best_baseline << ','
        << r.baseline_rmse << ',' << r.best_plus << ',' << r.plus_rmse << ',' << r.percent << '\n';
    }
  }
  {
    auto f = open("timings.csv");
    f << "variant,fraction,seed,seconds\n";
    for (const auto& r : table.rows) {
      f << r.variant << ',' << r.fraction << ',' << r.seed << ',' << r.seconds << '\n';
    }
  }
  auto f = open("table.txt");
  f << render_table(table);
}

}  // namespace debias_mf
