// debias-mf: ingestion, SAM fitting, training, evaluation and experiment
// reproduction from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "debias_mf/data.hpp"
#include "debias_mf/error.hpp"
#include "debias_mf/experiment.hpp"
#include "debias_mf/factorization.hpp"
#include "debias_mf/parallel.hpp"
#include "debias_mf/sam.hpp"
#include "debias_mf/textprep.hpp"

namespace fs = std::filesystem;
using namespace debias_mf;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

// Flags shared by several subcommands. Options are only applied when given,
// so a --config manifest supplies the defaults.
struct Flags {
  std::string dataset;
  std::string format = "csv";
  std::string corpus;
  std::string keep_list;
  std::string config;
  std::string variant;
  std::vector<std::string> variants;
  std::size_t d = 50;
  double lambda_u = 100.0;
  double lambda_v = 10.0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  int threads = default_threads();
  std::string out;
  std::vector<double> fractions;
  double train_fraction = 0.8;
  std::string objective = "spectral";
  bool clip = false;
  std::size_t sequence_length = 300;
  std::size_t vocabulary_size = 8000;
  std::size_t max_sweeps = 200;
  double sam_lr = 1.0;
  std::size_t sam_iters = 200;
};

struct Given {
  CLI::App* app;
  bool operator()(const char* name) const {
    const auto* opt = app->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  }
};

void add_data_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--dataset", f.dataset, "Ratings file")->required();
  cmd->add_option("--format", f.format, "Ratings format: ml100k, ml1m or csv")
      ->check(CLI::IsMember({"ml100k", "ml1m", "csv"}))
      ->capture_default_str();
  cmd->add_option("--keep-list", f.keep_list, "File of raw item ids to keep");
}

void add_corpus_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--corpus", f.corpus, "Item documents, one 'item_id<TAB>text' per line");
  cmd->add_option("--sequence-length", f.sequence_length, "Tokens kept per document")
      ->capture_default_str();
  cmd->add_option("--vocab-size", f.vocabulary_size, "Vocabulary cap")->capture_default_str();
}

void add_sam_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--objective", f.objective, "SAM objective: spectral or frobenius")
      ->check(CLI::IsMember({"spectral", "frobenius"}))
      ->capture_default_str();
  cmd->add_option("--sam-lr", f.sam_lr, "Largest SAM step size")->capture_default_str();
  cmd->add_option("--sam-iters", f.sam_iters, "SAM iteration cap")->capture_default_str();
}

void add_train_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--d", f.d, "Latent dimension")->capture_default_str();
  cmd->add_option("--lambda-u", f.lambda_u, "User factor penalty")->capture_default_str();
  cmd->add_option("--lambda-v", f.lambda_v, "Item factor penalty")->capture_default_str();
  cmd->add_option("--max-sweeps", f.max_sweeps, "Alternating sweep cap")->capture_default_str();
  cmd->add_flag("--clip-predictions", f.clip, "Clip predictions to [1, 5]");
  add_sam_flags(cmd, f);
}

void add_common_flags(CLI::App* cmd, Flags& f, bool seed) {
  if (seed) cmd->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  cmd->add_option("--threads", f.threads, "Worker threads (default DEBIAS_MF_THREADS or 1)")
      ->capture_default_str();
}

RatingDataset load_data(const Flags& f, IngestReport* report = nullptr) {
  std::optional<fs::path> keep;
  if (!f.keep_list.empty()) keep = f.keep_list;
  return load_ratings(f.dataset, parse_rating_format(f.format), keep, report);
}

Corpus load_corpus(const RatingDataset& data, const Flags& f) {
  std::size_t missing = 0;
  const auto docs = align_documents(data, read_documents(f.corpus), &missing);
  if (missing == docs.size()) throw DataError("no item in the dataset has a document in " + f.corpus);
  if (missing > 0) std::cerr << "note: " << missing << " items have no document\n";
  const auto vocab = build_vocabulary(docs, f.vocabulary_size);
  return encode_corpus(docs, vocab, f.sequence_length);
}

void apply_train_flags(TrainConfig& t, const Flags& f, Given given) {
  if (given("--d")) t.dim = f.d;
  if (given("--lambda-u")) t.lambda_u = f.lambda_u;
  if (given("--lambda-v")) t.lambda_v = f.lambda_v;
  if (given("--max-sweeps")) t.max_sweeps = f.max_sweeps;
  if (given("--clip-predictions")) t.clip_predictions = f.clip;
  if (given("--objective")) t.sam.evaluation.objective = parse_sam_objective(f.objective);
  if (given("--sam-lr")) t.sam.learning_rate = f.sam_lr;
  if (given("--sam-iters")) t.sam.max_iters = f.sam_iters;
  if (given("--seed")) t.seed = f.seed;
  t.threads = f.threads;
}

ExperimentConfig base_config(const Flags& f) {
  ExperimentConfig config;
  if (!f.config.empty()) config = load_experiment_config(f.config);
  return config;
}

fs::path require_out(const Flags& f) {
  if (f.out.empty()) throw UsageError("--out is required");
  fs::create_directories(f.out);
  return f.out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_ingest(const Flags& f, const std::string& input) {
  Flags g = f;
  g.dataset = input;
  IngestReport report;
  const auto data = load_data(g, &report);
  std::cout << "m=" << data.num_users() << " n=" << data.num_items() << " ratings=" << data.size()
            << " density=" << std::fixed << std::setprecision(4) << 100.0 * data.density() << "%"
            << " duplicates=" << report.duplicates << " dropped=" << report.dropped_by_keep_list
            << '\n';
  if (!f.out.empty()) write_ratings_csv(data, f.out);
  return 0;
}

int cmd_fit_sam(const Flags& f, Given given) {
  const auto out = require_out(f);
  const auto data = load_data(f);
  if (f.corpus.empty()) throw DataError("fit-sam needs an item corpus (--corpus)");
  const auto corpus = load_corpus(data, f);
  TrainConfig t;
  apply_train_flags(t, f, given);
  EncoderConfig head_cfg = t.sam_head;
  head_cfg.vocab_size = corpus.vocab_size();
  t.sam.evaluation.threads = f.threads;
  const auto model = fit_sam(EncoderParams::random(head_cfg, f.seed), corpus, IndicatorView(data), t.sam);
  write_weights_csv(model.weights, out / "weights.csv");
  model.head.save(out / "sam_head.bin", f.seed);
  std::cout << "objective " << std::setprecision(10) << model.objective_trace.front() << " -> "
            << model.objective_trace.back() << " in " << model.iterations << " iterations"
            << (model.converged ? "" : " (iteration cap reached)") << '\n';
  return 0;
}

int cmd_train(const Flags& f, Given given) {
  const auto out = require_out(f);
  ExperimentConfig config = base_config(f);
  TrainConfig t = config.train;
  apply_train_flags(t, f, given);
  const Variant variant = parse_variant(f.variant);
  if (needs_corpus(variant) && f.corpus.empty()) {
    throw DataError("variant " + f.variant + " needs an item corpus (--corpus)");
  }
  auto data = load_data(f);
  std::optional<Corpus> corpus;
  if (!f.corpus.empty()) corpus = load_corpus(data, f);

  std::optional<RatingDataset> test;
  if (given("--train-fraction")) {
    auto parts = split(data, f.train_fraction, t.seed);
    write_ratings_csv(parts.train, out / "train.csv");
    write_ratings_csv(parts.test, out / "test.csv");
    data = std::move(parts.train);
    test = std::move(parts.test);
  }
  const auto state = train(data, corpus ? &*corpus : nullptr, t, variant);

  write_matrix_csv(state.model.user, out / "user_factors.csv");
  write_matrix_csv(state.model.item, out / "item_factors.csv");
  write_weights_csv(state.weights, out / "weights.csv");
  write_trace_csv(state.trace, out / "trace.csv");
  if (state.item_encoder) state.item_encoder->save(out / "item_encoder.bin", t.seed);
  if (state.sam) state.sam->head.save(out / "sam_head.bin", t.seed);
  nlohmann::json meta = {{"variant", to_string(variant)},
                         {"num_users", data.num_users()},
                         {"num_items", data.num_items()},
                         {"dim", t.dim},
                         {"lambda_u", t.lambda_u},
                         {"lambda_v", t.lambda_v},
                         {"seed", t.seed},
                         {"sweeps", state.sweeps},
                         {"best_sweep", state.best_sweep},
                         {"early_stopped", state.early_stopped},
                         {"monotone", state.monotone},
                         {"encoder_flagged", state.encoder_flagged},
                         {"clip_predictions", t.clip_predictions}};
  write_json(out / "model.json", meta);

  std::cout << to_string(variant) << ": " << state.sweeps << " sweeps, best " << state.best_sweep
            << (state.monotone ? "" : ", loss increased beyond slack");
  if (test) std::cout << ", test RMSE " << std::setprecision(6) << rmse(state.model, *test, t);
  std::cout << '\n';
  if (state.encoder_flagged) std::cerr << "warning: an encoder block was rolled back 5 times\n";
  return 0;
}

int cmd_evaluate(const Flags& f, const std::string& model_dir) {
  std::ifstream meta_in(fs::path(model_dir) / "model.json");
  if (!meta_in) throw DataError("cannot open " + (fs::path(model_dir) / "model.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model.json: ") + e.what());
  }
  FactorModel model;
  model.user = read_matrix_csv(fs::path(model_dir) / "user_factors.csv");
  model.item = read_matrix_csv(fs::path(model_dir) / "item_factors.csv");
  const auto test = read_ratings_csv(f.dataset, model.user.rows(), model.item.rows());
  TrainConfig t;
  t.clip_predictions = f.clip || meta.value("clip_predictions", false);
  std::cout << "rmse " << std::setprecision(17) << rmse(model, test, t) << '\n';
  return 0;
}

ExperimentConfig experiment_config(const Flags& f, Given given) {
  ExperimentConfig config = base_config(f);
  if (given("--dataset")) {
    config.dataset.kind = parse_dataset_kind(f.format);
    config.dataset.path = f.dataset;
  }
  if (given("--keep-list")) config.dataset.keep_list = f.keep_list;
  if (given("--corpus")) config.dataset.documents = f.corpus;
  if (given("--sequence-length")) config.dataset.sequence_length = f.sequence_length;
  if (given("--vocab-size")) config.dataset.vocabulary_size = f.vocabulary_size;
  if (given("--variant")) {
    config.variants.clear();
    for (const auto& v : f.variants) config.variants.push_back(parse_variant(v));
  }
  if (given("--seed")) config.seeds = f.seeds;
  if (given("--fractions")) config.fractions = f.fractions;
  if (given("--train-fraction")) config.train_fraction = f.train_fraction;
  if (given("--out")) config.output_dir = f.out;
  apply_train_flags(config.train, f, given);
  config.validate();
  return config;
}

int cmd_experiment(const Flags& f, Given given, bool sweep) {
  const auto config = experiment_config(f, given);
  const auto table = sweep ? run_sparsity_sweep(config) : run_table2(config);
  std::cout << render_table(table);
  if (config.output_dir) write_experiment(table, *config.output_dir);
  return 0;
}

struct SynthFlags {
  std::size_t m = 2000;
  std::size_t n = 50;
  std::size_t rank = 3;
  double noise_sd = 0.5;
  std::vector<double> levels{0.3, 0.5, 0.8};
  std::size_t doc_length = 20;
  std::size_t filler = 30;
};

int cmd_synth(const Flags& f, const SynthFlags& s) {
  const auto out = require_out(f);
  const auto propensity = grouped_propensity(s.n, s.levels);
  const auto data = generate_synthetic(s.m, s.n, s.rank, propensity, s.noise_sd, f.seed);
  write_synthetic(data, out / "ratings.csv", out / "truth.json");
  std::vector<std::size_t> groups(s.n);
  std::vector<std::int64_t> ids(s.n);
  for (std::size_t j = 0; j < s.n; ++j) {
    groups[j] = j % s.levels.size();
    ids[j] = static_cast<std::int64_t>(j);
  }
  write_documents(out / "documents.tsv", ids,
                  synthetic_documents(groups, s.doc_length, s.filler, f.seed + 1));
  std::cout << "m=" << s.m << " n=" << s.n << " ratings=" << data.observed.size() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias-corrected matrix factorization with text-conditioned weights"};
  app.require_subcommand(1, 1);
  Flags f;
  SynthFlags s;
  std::string input;
  std::string model_dir;

  auto* ingest = app.add_subcommand("ingest", "Load a ratings file, print stats, write canonical CSV");
  ingest->add_option("input", input, "Ratings file")->required();
  ingest->add_option("--format", f.format, "Ratings format: ml100k, ml1m or csv")
      ->check(CLI::IsMember({"ml100k", "ml1m", "csv"}))
      ->capture_default_str();
  ingest->add_option("--keep-list", f.keep_list, "File of raw item ids to keep");
  ingest->add_option("--out", f.out, "Canonical CSV output path");

  auto* fit = app.add_subcommand("fit-sam", "Fit text-conditioned item weights on the indicator");
  add_data_flags(fit, f);
  add_corpus_flags(fit, f);
  add_sam_flags(fit, f);
  add_common_flags(fit, f, true);
  fit->add_option("--out", f.out, "Output directory (weights.csv, sam_head.bin)")->required();

  auto* tr = app.add_subcommand("train", "Train one variant");
  add_data_flags(tr, f);
  add_corpus_flags(tr, f);
  add_train_flags(tr, f);
  add_common_flags(tr, f, true);
  tr->add_option("--variant", f.variant, "mf, mf_plus, convmf, convmf_plus, ftmf or ftmf_plus")
      ->required();
  tr->add_option("--train-fraction", f.train_fraction,
                 "Split the dataset first and report test RMSE on the held-out part");
  tr->add_option("--config", f.config, "JSON experiment manifest; its train section sets defaults");
  tr->add_option("--out", f.out, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "RMSE of a trained model on a test CSV");
  ev->add_option("--model", model_dir, "Directory written by train")->required();
  ev->add_option("--dataset", f.dataset, "Test ratings CSV")->required();
  ev->add_flag("--clip-predictions", f.clip, "Clip predictions to [1, 5]");

  CLI::App* experiments[2];
  const char* names[2] = {"table2", "sweep"};
  const char* about[2] = {"Median test RMSE per variant over seeds, with the Improve row",
                          "Median test RMSE per variant at each train fraction"};
  for (int k = 0; k < 2; ++k) {
    auto* e = experiments[k] = app.add_subcommand(names[k], about[k]);
    e->add_option("--config", f.config, "JSON experiment manifest (flags override it)");
    e->add_option("--dataset", f.dataset, "Ratings file");
    e->add_option("--format", f.format, "Ratings format: ml100k, ml1m or csv")
        ->check(CLI::IsMember({"ml100k", "ml1m", "csv"}));
    e->add_option("--keep-list", f.keep_list, "File of raw item ids to keep");
    add_corpus_flags(e, f);
    add_train_flags(e, f);
    e->add_option("--variant", f.variants, "Variants to run")->delimiter(',');
    e->add_option("--seed", f.seeds, "Seeds, one run each")->delimiter(',');
    e->add_option("--threads", f.threads, "Worker threads (default DEBIAS_MF_THREADS or 1)")
        ->capture_default_str();
    e->add_option("--fractions", f.fractions, "Train fractions")->delimiter(',');
    e->add_option("--train-fraction", f.train_fraction, "Train fraction for table2");
    e->add_option("--out", f.out, "Output directory for CSV and table files");
  }

  auto* syn = app.add_subcommand("synth", "Generate a synthetic missing-not-at-random dataset");
  syn->add_option("--m", s.m, "Users")->capture_default_str();
  syn->add_option("--n", s.n, "Items")->capture_default_str();
  syn->add_option("--rank", s.rank, "True rank")->capture_default_str();
  syn->add_option("--noise-sd", s.noise_sd, "Rating noise")->capture_default_str();
  syn->add_option("--levels", s.levels, "Propensity levels, assigned round-robin to items")
      ->delimiter(',');
  syn->add_option("--doc-length", s.doc_length, "Tokens per item document")->capture_default_str();
  add_common_flags(syn, f, true);
  syn->add_option("--out", f.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*ingest) return cmd_ingest(f, input);
    if (*fit) return cmd_fit_sam(f, Given{fit});
    if (*tr) return cmd_train(f, Given{tr});
    if (*ev) return cmd_evaluate(f, model_dir);
    if (*experiments[0]) return cmd_experiment(f, Given{experiments[0]}, false);
    if (*experiments[1]) return cmd_experiment(f, Given{experiments[1]}, true);
    if (*syn) return cmd_synth(f, s);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
