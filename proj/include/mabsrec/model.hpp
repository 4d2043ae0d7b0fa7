#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mabsrec/bias_views.hpp"
#include "mabsrec/config.hpp"
#include "mabsrec/corpus.hpp"
#include "mabsrec/encoder.hpp"
#include "mabsrec/fusion.hpp"
#include "mabsrec/item_graph.hpp"

namespace mabsrec {

/// One prediction instance: the three padded bias views of an input window
/// and the item that follows it.
struct Example {
  UserIndex user = 0;
  std::array<PaddedWindow, kNumViews> views;
  ItemIndex target = kPadding;
  /// Length of the user's full chronological sequence (for length buckets).
  std::size_t sequence_length = 0;
  /// Items of the truncated input window, oldest first.
  std::vector<ItemIndex> history;
};

struct ModelGraphs {
  std::array<NormalizedItemGraph, kNumViews> views;
};

inline EncoderConfig encoder_config(const TrainConfig& c) {
  EncoderConfig e;
  e.embed_dim = c.embed_dim;
  e.heads = c.n_heads;
  e.layers = c.n_transformer_layers;
  e.max_len = c.max_seq_len;
  e.dropout_rate = c.dropout_rate;
  e.causal_mask = c.causal_mask;
  e.mask_padding = c.mask_padding;
  e.ffn_residual = c.ffn_residual;
  return e;
}

/// Deterministic initialization from cfg.seed.
inline ParamSet init_model_params(std::size_t n_items, const TrainConfig& cfg) {
  cfg.validate();
  ParamSet params;
  Rng rng(cfg.seed);
  init_encoder_params(params, n_items, encoder_config(cfg), rng);
  if (uses_fusion(cfg.ablation)) init_fusion_params(params, cfg.embed_dim, rng);
  return params;
}

inline std::size_t model_param_count(std::size_t n_items, const TrainConfig& cfg) {
  return encoder_param_count(n_items, encoder_config(cfg)) + (uses_fusion(cfg.ablation) ? fusion_param_count(cfg.embed_dim) : 0);
}

inline std::size_t n_items_of(const ParamSet& params) { return params.value(kItemEmbeddings).rows() - 1; }

/// logits[:, j] = <e_pred, table[j + 1]>; the padding row is not a candidate.
inline Var score_items(Var e_pred, Var table) {
  const std::size_t n = table.value().rows() - 1;
  return numeric::matmul(e_pred, numeric::slice_rows(table, 1, n), false, true);
}

/// Mean full-softmax cross-entropy; targets are 1-based item indices.
inline Var rec_loss(Var logits, std::span<const ItemIndex> targets) {
  const std::size_t n = logits.value().cols();
  std::vector<std::size_t> cols;
  cols.reserve(targets.size());
  for (ItemIndex t : targets) {
    if (t == kPadding || t > n) throw InvalidArgument("target item " + std::to_string(t) + " outside [1, " + std::to_string(n) + "]");
    cols.push_back(t - 1);
  }
  return numeric::cross_entropy_with_logits(logits, std::move(cols));
}

struct ForwardOutput {
  Var logits;
  /// B x 3 view scores; empty for the fusion-free variants.
  Var scores;
  Var e_pred;
  std::array<Var, kNumViews> encodings;
};

/// Full model over a batch: per-view graph-enriched tables, one shared
/// encoder pass over all 3B view windows, fusion (or mean), item scores.
inline ForwardOutput forward_batch(Tape& tape, ParamSet& params, const ModelGraphs& graphs,
                                   std::span<const Example* const> batch, const TrainConfig& cfg, bool train, Rng& rng) {
  if (batch.empty()) throw InvalidArgument("forward_batch: empty batch");
  const std::size_t B = batch.size();
  Var items = tape.parameter(params, kItemEmbeddings);
  Var positions = tape.parameter(params, kPositions);

  std::array<Var, kNumViews> propagated;
  std::array<Var, kNumViews> tables;
  for (std::size_t v = 0; v < kNumViews; ++v) {
    if (uses_graph(cfg.ablation)) {
      propagated[v] = propagate(items, graphs.views[v], cfg.n_graph_layers);
      tables[v] = numeric::dropout(propagated[v], cfg.graph_dropout_rate, train, rng);
    } else {
      tables[v] = items;
    }
  }

  std::vector<const PaddedWindow*> windows;
  windows.reserve(kNumViews * B);
  std::vector<Var> embedded;
  for (std::size_t v = 0; v < kNumViews; ++v) {
    const std::size_t first = windows.size();
    for (const Example* ex : batch) windows.push_back(&ex->views[v]);
    embedded.push_back(embed_with_positions(tables[v], std::span(windows).subspan(first, B), positions));
  }
  const EncoderConfig ecfg = encoder_config(cfg);
  Var encoded = encode_embedded(tape, params, numeric::concat_rows(embedded), windows, ecfg, train, rng);

  ForwardOutput out;
  for (std::size_t v = 0; v < kNumViews; ++v) out.encodings[v] = numeric::slice_rows(encoded, v * B, B);
  const auto& [x_pop, x_subj, x_deb] = out.encodings;
  if (uses_fusion(cfg.ablation)) {
    out.scores = bias_scores(tape, params, fuse_features(x_pop, x_subj, x_deb, cfg.fusion_triple_sum));
    out.e_pred = predict_vector(out.scores, x_pop, x_subj, x_deb);
  } else {
    out.e_pred = numeric::mean_of({x_pop, x_subj, x_deb});
  }
  Var table = items;
  if (cfg.score_against_graph_embeddings && uses_graph(cfg.ablation)) {
    table = numeric::mean_of({propagated[0], propagated[1], propagated[2]});
  }
  out.logits = score_items(out.e_pred, table);
  return out;
}

inline ForwardOutput forward_user(Tape& tape, ParamSet& params, const ModelGraphs& graphs, const Example& example,
                                  const TrainConfig& cfg, bool train, Rng& rng) {
  const Example* p = &example;
  return forward_batch(tape, params, graphs, std::span<const Example* const>(&p, 1), cfg, train, rng);
}

/// Everything derived from a corpus for one (k_pop, k_subj, L) setting.
struct TrainingData {
  std::size_t n_items = 0;
  PopularityScores popularity;
  std::array<TransitionGraph, kNumViews> transitions;
  ModelGraphs graphs;
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
  /// Partition of each user's training-split window (one per sequence, corpus order).
  std::vector<BiasPartition> train_partitions;
};

inline Example make_example(UserIndex user, std::span<const ItemIndex> input, ItemIndex target, std::size_t sequence_length,
                            const PopularityScores& popularity, const CategoryTable& categories, const TrainConfig& cfg,
                            BiasPartition* partition_out = nullptr) {
  Example ex;
  ex.user = user;
  ex.target = target;
  ex.sequence_length = sequence_length;
  const PaddedWindow window = pad_truncate(input, cfg.max_seq_len);
  const auto items = window.items();
  ex.history.assign(items.begin(), items.end());
  const BiasPartition part = partition_window(window, popularity, categories, cfg.k_pop, cfg.k_subj);
  for (std::size_t v = 0; v < kNumViews; ++v) ex.views[v] = pad_truncate(view_items(part, v), cfg.max_seq_len);
  if (partition_out) *partition_out = part;
  return ex;
}

/// Leave-one-out examples, popularity and per-view graphs. Popularity and
/// graphs only see the training prefix of each user. Training examples predict
/// the last training item from the items before it (or, with
/// per_position_targets, every training item from its prefix).
inline TrainingData build_training_data(const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  TrainingData data;
  data.n_items = corpus.n_items();
  std::vector<LeaveOneOutSplit> splits;
  splits.reserve(corpus.sequences.size());
  std::vector<std::vector<ItemIndex>> prefixes;
  for (const auto& seq : corpus.sequences) {
    splits.push_back(split_leave_one_out(seq));
    prefixes.push_back(splits.back().train);
  }
  data.popularity = popularity_scores(prefixes, data.n_items);

  std::array<std::vector<std::vector<ItemIndex>>, kNumViews> view_sequences;
  for (std::size_t u = 0; u < corpus.sequences.size(); ++u) {
    const auto& seq = corpus.sequences[u];
    const auto& split = splits[u];
    const std::span<const ItemIndex> train_items(split.train);

    const std::size_t first_target = cfg.per_position_targets ? 1 : train_items.size() - 1;
    for (std::size_t j = std::max<std::size_t>(first_target, 1); j < train_items.size(); ++j) {
      data.train.push_back(make_example(seq.user, train_items.first(j), train_items[j], seq.length(), data.popularity,
                                        corpus.item_categories, cfg));
    }

    BiasPartition part;
    data.valid.push_back(make_example(seq.user, train_items, split.valid_target, seq.length(), data.popularity,
                                      corpus.item_categories, cfg, &part));
    for (std::size_t v = 0; v < kNumViews; ++v) view_sequences[v].push_back(view_items(part, v));
    data.train_partitions.push_back(std::move(part));

    std::vector<ItemIndex> test_input = split.train;
    test_input.push_back(split.valid_target);
    data.test.push_back(make_example(seq.user, test_input, split.test_target, seq.length(), data.popularity,
                                     corpus.item_categories, cfg));
  }
  for (std::size_t v = 0; v < kNumViews; ++v) {
    data.transitions[v] = build_adjacency(view_sequences[v], data.n_items);
    data.graphs.views[v] = normalize(data.transitions[v]);
  }
  return data;
}

}  // namespace mabsrec
