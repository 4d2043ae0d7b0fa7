#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mabsrec/config.hpp"
#include "mabsrec/corpus.hpp"
#include "mabsrec/evaluator.hpp"
#include "mabsrec/numeric/checkpoint.hpp"
#include "mabsrec/trainer.hpp"

namespace mabsrec::pipeline {

namespace fs = std::filesystem;

/// Everything one command needs: input locations, output directory and the
/// full training configuration.
struct RunConfig {
  std::string preset = "beauty";
  /// Free-form dataset id recorded in reports; defaults to the preset name.
  std::string dataset;
  std::string data;
  InputFormat format = InputFormat::csv_events;
  std::string movies;
  std::size_t min_len = 5;
  /// 0 keeps every sequence regardless of length.
  std::size_t max_keep = 0;
  std::string prepared;
  std::string checkpoint;
  std::string out = "out";
  std::string split = "test";
  std::vector<std::size_t> buckets = default_bucket_edges();
  TrainConfig train;

  std::string dataset_id() const { return dataset.empty() ? preset : dataset; }
};

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  if (detail::trim(text).empty()) return out;
  for (const auto& part : detail::split(text, ',')) out.push_back(mabsrec::detail::parse_number<std::size_t>(key, detail::trim(part)));
  return out;
}

/// Run-level keys followed by the TrainConfig keys, one `key = value` per line.
inline std::string to_kv(const RunConfig& r) {
  std::ostringstream os;
  os << "preset = " << r.preset << '\n'
     << "dataset = " << r.dataset_id() << '\n'
     << "data = " << r.data << '\n'
     << "format = " << to_string(r.format) << '\n'
     << "movies = " << r.movies << '\n'
     << "min-len = " << r.min_len << '\n'
     << "max-keep = " << r.max_keep << '\n'
     << "prepared = " << r.prepared << '\n'
     << "checkpoint = " << r.checkpoint << '\n'
     << "out = " << r.out << '\n'
     << "split = " << r.split << '\n'
     << "buckets = " << join_sizes(r.buckets) << '\n';
  return os.str() + mabsrec::to_kv(r.train);
}

/// Applies one key, run-level or TrainConfig. Unknown keys are an error.
inline void apply_kv(RunConfig& r, std::string_view key, std::string_view value) {
  using mabsrec::detail::parse_number;
  if (key == "preset") r.preset = value;
  else if (key == "dataset") r.dataset = value;
  else if (key == "data") r.data = value;
  else if (key == "format") r.format = parse_input_format(value);
  else if (key == "movies") r.movies = value;
  else if (key == "min-len") r.min_len = parse_number<std::size_t>(key, value);
  else if (key == "max-keep") r.max_keep = parse_number<std::size_t>(key, value);
  else if (key == "prepared") r.prepared = value;
  else if (key == "checkpoint") r.checkpoint = value;
  else if (key == "out") r.out = value;
  else if (key == "split") r.split = value;
  else if (key == "buckets") r.buckets = parse_sizes(key, value);
  else if (!mabsrec::apply_kv(r.train, key, value)) throw InvalidArgument("unknown config key '" + std::string(key) + "'");
}

/// Every accepted key in echo order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& line : detail::split(to_kv(RunConfig{}), '\n')) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) keys.push_back(line.substr(0, eq));
  }
  return keys;
}

/// Defaults of a dataset preset: training settings plus corpus filters
/// (MovieLens drops users with more than 50 interactions).
inline RunConfig preset_run_config(std::string_view preset) {
  RunConfig r;
  r.train = preset_config(preset);
  r.preset = preset;
  if (preset == "ml20m") r.max_keep = 50;
  return r;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// Layers preset defaults, then the config file, then explicit overrides
/// (flags win). The preset itself may come from either source.
inline RunConfig resolve_run_config(const std::optional<std::string>& config_path,
                                    const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::map<std::string, std::string> file;
  if (config_path) file = parse_kv(read_text(*config_path));
  std::string preset = "beauty";
  if (auto it = file.find("preset"); it != file.end()) preset = it->second;
  for (const auto& [k, v] : overrides)
    if (k == "preset") preset = v;
  RunConfig r = preset_run_config(preset);
  for (const auto& [k, v] : file) apply_kv(r, k, v);
  for (const auto& [k, v] : overrides) apply_kv(r, k, v);
  r.train.validate();
  if (r.split != "test" && r.split != "valid") throw InvalidArgument("split must be 'test' or 'valid', got '" + r.split + "'");
  return r;
}

// ---------------------------------------------------------------- prepare

struct CorpusStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double avg_length = 0.0;
  double density = 0.0;
  std::size_t users_seen = 0;
  std::size_t removed_short = 0;
  std::size_t removed_long = 0;
};

inline CorpusStats corpus_stats(const Corpus& c, const SequenceFilterStats& filter) {
  CorpusStats s;
  s.users = c.sequences.size();
  s.items = c.n_items();
  s.interactions = c.n_interactions();
  s.avg_length = static_cast<double>(s.interactions) / static_cast<double>(s.users);
  s.density = static_cast<double>(s.interactions) / (static_cast<double>(s.users) * static_cast<double>(s.items));
  s.users_seen = filter.users_seen;
  s.removed_short = filter.dropped_short;
  s.removed_long = filter.dropped_long;
  return s;
}

inline std::string format_stats(const std::string& dataset, const CorpusStats& s) {
  std::ostringstream os;
  os << "dataset = " << dataset << '\n'
     << "users = " << s.users << '\n'
     << "items = " << s.items << '\n'
     << "interactions = " << s.interactions << '\n'
     << "avg_length = " << std::fixed << std::setprecision(2) << s.avg_length << '\n'
     << "density = " << std::scientific << std::setprecision(6) << s.density << '\n'
     << "users_seen = " << s.users_seen << '\n'
     << "removed_short = " << s.removed_short << '\n'
     << "removed_long = " << s.removed_long << '\n';
  return os.str();
}

inline std::string vocabulary_hash(const Corpus& c) { return hex64(fnv1a(c.items.serialize())); }

inline std::string join_items(std::span<const ItemIndex> items) {
  std::string s;
  for (std::size_t k = 0; k < items.size(); ++k) s += (k ? " " : "") + std::to_string(items[k]);
  return s;
}

inline void save_corpus(const fs::path& dir, const Corpus& c) {
  write_text(dir / "users.tsv", c.users.serialize());
  write_text(dir / "items.tsv", c.items.serialize());
  write_text(dir / "categories.tsv", c.categories.serialize());
  std::string cats, seqs, splits;
  for (ItemIndex i = 1; i <= c.n_items(); ++i) {
    std::vector<ItemIndex> ids(c.item_categories[i].begin(), c.item_categories[i].end());
    cats += std::to_string(i) + '\t' + join_items(ids) + '\n';
  }
  for (const auto& s : c.sequences) {
    seqs += std::to_string(s.user) + '\t' + join_items(s.items) + '\n';
    const auto split = split_leave_one_out(s);
    splits += std::to_string(s.user) + '\t' + join_items(split.train) + '\t' + std::to_string(split.valid_target) + '\t' +
              std::to_string(split.test_target) + '\n';
  }
  write_text(dir / "item_categories.tsv", cats);
  write_text(dir / "sequences.tsv", seqs);
  write_text(dir / "splits.tsv", splits);
}

inline std::vector<std::uint32_t> parse_indices(std::string_view text, const std::string& file, std::size_t line) {
  std::vector<std::uint32_t> out;
  for (const auto& tok : detail::split(text, ' ')) {
    if (tok.empty()) continue;
    std::uint32_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError(file, line, "bad index '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

/// Reads a directory written by cmd_prepare back into a Corpus.
inline Corpus load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("prepared directory '" + dir.string() + "' does not exist (run prepare first)");
  auto vocab = [&](const char* name) {
    std::istringstream in(read_text(dir / name));
    return Vocabulary::parse(in, (dir / name).string());
  };
  Corpus c;
  c.users = vocab("users.tsv");
  c.items = vocab("items.tsv");
  c.categories = vocab("categories.tsv");

  auto rows = [&](const char* name, auto&& fn) {
    const std::string file = (dir / name).string();
    std::istringstream in(read_text(dir / name));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError(file, line_no, "expected 'index<TAB>list'");
      const auto head = parse_indices(std::string_view(line).substr(0, tab), file, line_no);
      if (head.size() != 1) throw ParseError(file, line_no, "bad leading index");
      fn(head[0], parse_indices(std::string_view(line).substr(tab + 1), file, line_no), file, line_no);
    }
  };
  rows("item_categories.tsv", [&](std::uint32_t item, std::vector<std::uint32_t> cats, const std::string& file, std::size_t ln) {
    if (item != c.item_categories.size()) throw ParseError(file, ln, "items must be consecutive from 1");
    for (auto cat : cats)
      if (cat == 0 || cat > c.categories.size()) throw ParseError(file, ln, "category index out of range");
    c.item_categories.push_back(std::move(cats));
  });
  rows("sequences.tsv", [&](std::uint32_t user, std::vector<std::uint32_t> items, const std::string& file, std::size_t ln) {
    if (user == 0 || user > c.users.size()) throw ParseError(file, ln, "user index out of range");
    for (auto i : items)
      if (i == 0 || i > c.items.size()) throw ParseError(file, ln, "item index out of range");
    c.sequences.push_back({user, std::move(items)});
  });
  if (c.item_categories.size() != c.items.size() + 1) throw IoError("item_categories.tsv does not cover every item");
  if (c.sequences.empty()) throw IoError("prepared corpus in '" + dir.string() + "' has no sequences");
  return c;
}

/// Dataset id recorded by prepare, unless the run names one itself.
inline RunConfig with_prepared_dataset(RunConfig run) {
  if (!run.dataset.empty()) return run;
  const fs::path echo = fs::path(run.prepared) / "config.txt";
  if (fs::exists(echo)) {
    const auto kv = parse_kv(read_text(echo));
    if (auto it = kv.find("dataset"); it != kv.end()) run.dataset = it->second;
  }
  return run;
}

struct PrepareResult {
  CorpusStats stats;
  std::string vocab_hash;
};

/// Ingests the dataset and writes vocabularies, sequences, splits, the
/// training-window partitions, the three view graphs, statistics and the
/// config echo into `run.out`.
inline PrepareResult cmd_prepare(const RunConfig& run, std::ostream& log) {
  if (run.data.empty()) throw InvalidArgument("prepare: --data is required");
  const auto movies = run.movies.empty() ? std::nullopt : std::optional<std::string>(run.movies);
  const InteractionLog events = load_interactions(run.data, run.format, movies);
  SequenceFilterStats filter;
  std::optional<std::size_t> max_keep;
  if (run.max_keep) max_keep.emplace(run.max_keep);
  const Corpus corpus = make_corpus(events, build_sequences(events, run.min_len, max_keep, &filter));
  const TrainingData data = build_training_data(corpus, run.train);

  const fs::path dir(run.out);
  fs::create_directories(dir);
  save_corpus(dir, corpus);
  std::string parts;
  for (std::size_t u = 0; u < corpus.sequences.size(); ++u) parts += format_partition(corpus.sequences[u].user, data.train_partitions[u]) + '\n';
  write_text(dir / "partitions.tsv", parts);
  for (std::size_t v = 0; v < kNumViews; ++v) write_text(dir / (std::string("graph_") + kViewNames[v] + ".edges"), export_edges(data.transitions[v]));

  PrepareResult result{corpus_stats(corpus, filter), vocabulary_hash(corpus)};
  const std::string stats = format_stats(run.dataset_id(), result.stats) + "vocab_hash = " + result.vocab_hash + '\n';
  write_text(dir / "stats.txt", stats);
  write_text(dir / "config.txt", to_kv(run));
  log << stats;
  return result;
}

// ---------------------------------------------------------------- train

inline std::string config_hash(const TrainConfig& cfg) { return hex64(fnv1a(mabsrec::to_kv(cfg))); }

inline nlohmann::ordered_json epoch_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "epoch";
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_recall@10"] = r.val_recall10;
  j["val_ndcg@10"] = r.val_ndcg10;
  j["wall_ms"] = r.wall_ms;
  return j;
}

struct TrainOutcome {
  TrainResult result;
  fs::path checkpoint;
  fs::path log;
};

/// Trains one variant on prepared data; writes `dir/model.ckpt`,
/// `dir/train_log.jsonl` (header line, then one line per epoch) and the echo.
inline TrainOutcome train_variant(const RunConfig& run, const Corpus& corpus, const TrainingData& data, const fs::path& dir,
                                  std::ostream& log) {
  fs::create_directories(dir);
  TrainOutcome outcome;
  outcome.checkpoint = dir / "model.ckpt";
  outcome.log = dir / "train_log.jsonl";
  std::ofstream jsonl(outcome.log, std::ios::binary);
  if (!jsonl) throw IoError("cannot write '" + outcome.log.string() + "'");

  nlohmann::ordered_json header;
  header["type"] = "header";
  header["variant"] = to_string(run.train.ablation);
  header["dataset"] = run.dataset_id();
  header["seed"] = run.train.seed;
  header["config_hash"] = config_hash(run.train);
  header["vocab_hash"] = vocabulary_hash(corpus);
  header["n_items"] = data.n_items;
  header["n_train_examples"] = data.train.size();
  header["n_params"] = model_param_count(data.n_items, run.train);
  jsonl << header.dump() << '\n';
  write_text(dir / "config.txt", to_kv(run));

  outcome.result = train(data, run.train, [&](const EpochRecord& rec, const ParamSet&) {
    jsonl << epoch_json(rec).dump() << '\n' << std::flush;
    log << "[" << to_string(run.train.ablation) << "] epoch " << rec.epoch << " loss " << rec.train_loss << " val recall@10 "
        << rec.val_recall10 << " ndcg@10 " << rec.val_ndcg10 << '\n';
  });

  numeric::Checkpoint ckpt;
  ckpt.params = outcome.result.params;
  ckpt.metadata["config"] = "dataset = " + run.dataset_id() + "\n" + mabsrec::to_kv(run.train);
  ckpt.metadata["config_hash"] = config_hash(run.train);
  ckpt.metadata["vocab_hash"] = vocabulary_hash(corpus);
  ckpt.metadata["variant"] = to_string(run.train.ablation);
  ckpt.metadata["dataset"] = run.dataset_id();
  ckpt.metadata["best_epoch"] = std::to_string(outcome.result.best_epoch);
  numeric::save_checkpoint(outcome.checkpoint.string(), ckpt);
  log << "best epoch " << outcome.result.best_epoch << " (val recall@10 " << outcome.result.best_val_recall10 << ", ndcg@10 "
      << outcome.result.best_val_ndcg10 << "), checkpoint " << outcome.checkpoint.string() << '\n';
  return outcome;
}

inline TrainOutcome cmd_train(const RunConfig& given, std::ostream& log) {
  if (given.prepared.empty()) throw InvalidArgument("train: --prepared is required");
  const RunConfig run = with_prepared_dataset(given);
  const Corpus corpus = load_corpus(run.prepared);
  const TrainingData data = build_training_data(corpus, run.train);
  return train_variant(run, corpus, data, run.out, log);
}

// ---------------------------------------------------------------- eval

/// Checks that `params` has exactly the tensors a freshly initialized model
/// of this configuration would have.
inline void check_compatible(const ParamSet& params, std::size_t n_items, const TrainConfig& cfg) {
  const ParamSet expected = init_model_params(n_items, cfg);
  if (params.size() != expected.size()) {
    throw InvalidArgument("checkpoint has " + std::to_string(params.size()) + " tensors, the configured model needs " +
                          std::to_string(expected.size()));
  }
  for (std::size_t k = 0; k < expected.size(); ++k) {
    const auto& e = expected.entry(k);
    if (!params.contains(e.name)) throw InvalidArgument("checkpoint lacks tensor '" + e.name + "'");
    if (!params.value(e.name).same_shape(e.value)) throw ShapeError("checkpoint tensor '" + e.name + "' has the wrong shape");
  }
}

inline std::string scores_csv(const std::vector<ScoreTriple>& scores, const Corpus& corpus) {
  std::ostringstream os;
  os.precision(17);
  os << "user_id,s_P,s_A,s_D\n";
  for (const auto& s : scores) os << corpus.users.token(s.user) << ',' << s.scores[0] << ',' << s.scores[1] << ',' << s.scores[2] << '\n';
  return os.str();
}

/// Scores a checkpoint against the prepared corpus. The model configuration
/// comes from the checkpoint; `filter-seen`, the split and the buckets come
/// from `run`. Writes report.txt, report.csv and (for fused variants)
/// scores.csv into `run.out`.
inline EvalReport cmd_eval(const RunConfig& run, std::ostream& log) {
  if (run.prepared.empty()) throw InvalidArgument("eval: --prepared is required");
  if (run.checkpoint.empty()) throw InvalidArgument("eval: --checkpoint is required");
  const Corpus corpus = load_corpus(run.prepared);
  numeric::Checkpoint ckpt = numeric::load_checkpoint(run.checkpoint);
  const std::string prepared_hash = vocabulary_hash(corpus);
  const auto hash_it = ckpt.metadata.find("vocab_hash");
  if (hash_it == ckpt.metadata.end()) throw IoError("checkpoint '" + run.checkpoint + "' carries no vocabulary hash");
  if (hash_it->second != prepared_hash) {
    throw Error("vocab_mismatch", "checkpoint vocabulary hash " + hash_it->second + " does not match prepared vocabulary hash " +
                                      prepared_hash + " in '" + run.prepared + "'");
  }
  RunConfig trained;
  for (const auto& [k, v] : parse_kv(ckpt.metadata.at("config"))) apply_kv(trained, k, v);
  TrainConfig cfg = trained.train;
  cfg.filter_seen = run.train.filter_seen;
  cfg.micro_batch = run.train.micro_batch;
  check_compatible(ckpt.params, corpus.n_items(), cfg);

  const TrainingData data = build_training_data(corpus, cfg);
  std::vector<ScoreTriple> scores;
  EvalReport report = evaluate(ckpt.params, data.graphs, run.split == "valid" ? data.valid : data.test, cfg, run.buckets, &scores);
  report.metadata["dataset"] = trained.dataset_id();
  report.metadata["variant"] = to_string(cfg.ablation);
  report.metadata["seed"] = std::to_string(cfg.seed);
  report.metadata["config_hash"] = config_hash(cfg);
  report.metadata["vocab_hash"] = prepared_hash;
  report.metadata["split"] = run.split;
  report.metadata["filter_seen"] = cfg.filter_seen ? "true" : "false";

  const fs::path dir(run.out);
  fs::create_directories(dir);
  write_text(dir / "report.txt", to_text(report));
  write_text(dir / "report.csv", to_csv(report));
  if (uses_fusion(cfg.ablation)) write_text(dir / "scores.csv", scores_csv(scores, corpus));
  write_text(dir / "config.txt", to_kv(run));
  log << to_text(report);
  return report;
}

// ---------------------------------------------------------------- ablate

struct AblationRow {
  Ablation variant = Ablation::full;
  double ndcg5 = 0.0;
  double ndcg10 = 0.0;
  EvalReport report;
};

inline std::string format_ablation(const std::string& dataset, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "dataset = " << dataset << '\n' << std::left << std::setw(8) << "variant" << std::setw(16) << "ndcg@5" << "ndcg@10" << '\n';
  for (const auto& r : rows)
    os << std::setw(8) << to_string(r.variant) << std::setw(16) << detail::fmt_metric(r.ndcg5) << detail::fmt_metric(r.ndcg10) << '\n';
  return os.str();
}

inline std::string ablation_csv(const std::string& dataset, const std::vector<AblationRow>& rows) {
  std::string s = "dataset,variant,ndcg@5,ndcg@10\n";
  for (const auto& r : rows) s += dataset + ',' + to_string(r.variant) + ',' + detail::fmt_metric(r.ndcg5) + ',' + detail::fmt_metric(r.ndcg10) + '\n';
  return s;
}

/// Trains full, wo_G, wo_A and wo_D under the same seed and compares test
/// NDCG@5/10. Each variant's checkpoint and log go to `run.out/<variant>/`.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& given, std::ostream& log) {
  if (given.prepared.empty()) throw InvalidArgument("ablate: --prepared is required");
  const RunConfig run = with_prepared_dataset(given);
  const Corpus corpus = load_corpus(run.prepared);
  const TrainingData data = build_training_data(corpus, run.train);
  const fs::path dir(run.out);
  fs::create_directories(dir);
  write_text(dir / "config.txt", to_kv(run));

  std::vector<AblationRow> rows;
  for (Ablation variant : {Ablation::full, Ablation::wo_G, Ablation::wo_A, Ablation::wo_D}) {
    RunConfig r = run;
    r.train.ablation = variant;
    TrainOutcome trained = train_variant(r, corpus, data, dir / to_string(variant), log);
    AblationRow row;
    row.variant = variant;
    row.report = evaluate(trained.result.params, data.graphs, data.test, r.train, r.buckets);
    row.ndcg5 = row.report.at("ndcg@5");
    row.ndcg10 = row.report.at("ndcg@10");
    rows.push_back(std::move(row));
  }
  const std::string table = format_ablation(run.dataset_id(), rows);
  write_text(dir / "ablation.txt", table);
  write_text(dir / "ablation.csv", ablation_csv(run.dataset_id(), rows));
  log << table;
  return rows;
}

}  // namespace mabsrec::pipeline
