#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mabsrec/corpus.hpp"
#include "mabsrec/error.hpp"
#include "mabsrec/numeric/kernels.hpp"
#include "mabsrec/numeric/params.hpp"

namespace mabsrec {

using numeric::ParamSet;
using numeric::Rng;
using numeric::Tape;
using numeric::Tensor;
using numeric::Var;

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t heads = 1;
  std::size_t layers = 2;
  std::size_t max_len = 50;
  double dropout_rate = 0.0;
  bool causal_mask = true;
  bool mask_padding = false;
  bool ffn_residual = true;
};

inline constexpr const char* kItemEmbeddings = "item_embeddings";
inline constexpr const char* kPositions = "positions";

inline std::string layer_param(std::size_t layer, const char* name) {
  return "encoder." + std::to_string(layer) + "." + name;
}

/// Registers the item table, position matrix and one parameter group per
/// transformer layer. Row 0 of the item table (padding) starts at zero and
/// never receives gradient.
inline void init_encoder_params(ParamSet& params, std::size_t n_items, const EncoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.embed_dim;
  if (cfg.heads == 0 || d % cfg.heads != 0) throw InvalidArgument("embed_dim must be divisible by heads");
  Tensor items = numeric::init::normal({n_items + 1, d}, 0.02, rng);
  for (double& v : items.row(0)) v = 0.0;
  params.add(kItemEmbeddings, std::move(items));
  params.add(kPositions, numeric::init::normal({cfg.max_len, d}, 0.02, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) params.add(layer_param(l, w), numeric::init::fan_avg_uniform(d, d, rng));
    params.add(layer_param(l, "ln1.gamma"), Tensor::vector(d, 1.0));
    params.add(layer_param(l, "ln1.beta"), Tensor::vector(d, 0.0));
    params.add(layer_param(l, "ffn.w1"), numeric::init::fan_avg_uniform(d, d, rng));
    params.add(layer_param(l, "ffn.b1"), Tensor::vector(d, 0.0));
    params.add(layer_param(l, "ffn.w2"), numeric::init::fan_avg_uniform(d, d, rng));
    params.add(layer_param(l, "ffn.b2"), Tensor::vector(d, 0.0));
    if (cfg.ffn_residual) {
      params.add(layer_param(l, "ln2.gamma"), Tensor::vector(d, 1.0));
      params.add(layer_param(l, "ln2.beta"), Tensor::vector(d, 0.0));
    }
  }
}

/// Closed-form encoder parameter count; independent of the number of views.
inline std::size_t encoder_param_count(std::size_t n_items, const EncoderConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t per_layer = 6 * d * d + 2 * d + 2 * d + (cfg.ffn_residual ? 2 * d : 0);
  return (n_items + 1) * d + cfg.max_len * d + cfg.layers * per_layer;
}

/// Row s*L + j of the result is table[windows[s].slots[j]] + positions[j].
inline Var embed_with_positions(Var table, std::span<const PaddedWindow* const> windows, Var positions) {
  const std::size_t L = positions.value().rows();
  std::vector<std::size_t> item_rows;
  std::vector<std::size_t> pos_rows;
  item_rows.reserve(windows.size() * L);
  pos_rows.reserve(windows.size() * L);
  for (const PaddedWindow* w : windows) {
    if (w->length() != L) {
      throw ShapeError("window length " + std::to_string(w->length()) + " differs from position matrix length " + std::to_string(L));
    }
    for (std::size_t j = 0; j < L; ++j) {
      item_rows.push_back(w->slots[j]);
      pos_rows.push_back(j);
    }
  }
  Var items = numeric::gather_rows(table, std::move(item_rows), kPadding);
  return numeric::add(items, numeric::gather_rows(positions, std::move(pos_rows)));
}

/// Views of one transformer layer's parameters on a tape.
struct LayerWeights {
  Var wq, wk, wv, wo, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta;

  static LayerWeights bind(Tape& tape, ParamSet& params, std::size_t layer, bool ffn_residual) {
    LayerWeights w;
    auto p = [&](const char* name) { return tape.parameter(params, layer_param(layer, name)); };
    w.wq = p("wq");
    w.wk = p("wk");
    w.wv = p("wv");
    w.wo = p("wo");
    w.ln1_gamma = p("ln1.gamma");
    w.ln1_beta = p("ln1.beta");
    w.w1 = p("ffn.w1");
    w.b1 = p("ffn.b1");
    w.w2 = p("ffn.w2");
    w.b2 = p("ffn.b2");
    if (ffn_residual) {
      w.ln2_gamma = p("ln2.gamma");
      w.ln2_beta = p("ln2.beta");
    }
    return w;
  }
};

/// Multi-head self-attention, output projection, then LN(x + attention(x)).
inline Var attention_block(Var x, const LayerWeights& w, const EncoderConfig& cfg, std::vector<bool> masked_keys, bool train,
                           Rng& rng) {
  Var q = numeric::matmul(x, w.wq);
  Var k = numeric::matmul(x, w.wk);
  Var v = numeric::matmul(x, w.wv);
  numeric::AttentionOptions opt;
  opt.seq_len = cfg.max_len;
  opt.heads = cfg.heads;
  opt.causal = cfg.causal_mask;
  opt.masked_keys = std::move(masked_keys);
  opt.dropout_rate = cfg.dropout_rate;
  opt.train = train;
  Var heads = numeric::attention(q, k, v, std::move(opt), rng);
  Var projected = numeric::matmul(heads, w.wo);
  return numeric::layer_norm(numeric::add(x, projected), w.ln1_gamma, w.ln1_beta);
}

/// Position-wise GELU(x W1 + b1) W2 + b2 with output dropout, wrapped in
/// LN(x + .) when ffn_residual is on.
inline Var ffn(Var x, const LayerWeights& w, const EncoderConfig& cfg, bool train, Rng& rng) {
  Var hidden = numeric::gelu(numeric::add_bias(numeric::matmul(x, w.w1), w.b1));
  Var out = numeric::add_bias(numeric::matmul(hidden, w.w2), w.b2);
  out = numeric::dropout(out, cfg.dropout_rate, train, rng);
  if (!cfg.ffn_residual) return out;
  return numeric::layer_norm(numeric::add(x, out), w.ln2_gamma, w.ln2_beta);
}

/// Runs the shared transformer stack over consecutive L-row blocks of
/// `embedded` (already position-embedded) and returns one row per window: the
/// last-slot representation, or zeros for an empty window.
inline Var encode_embedded(Tape& tape, ParamSet& params, Var embedded, std::span<const PaddedWindow* const> windows,
                           const EncoderConfig& cfg, bool train, Rng& rng) {
  const std::size_t L = cfg.max_len;
  std::vector<bool> masked_keys;
  if (cfg.mask_padding) {
    masked_keys.reserve(windows.size() * L);
    for (const PaddedWindow* w : windows)
      for (std::size_t j = 0; j < L; ++j) masked_keys.push_back(w->slots[j] == kPadding);
  }
  Var h = numeric::dropout(embedded, cfg.dropout_rate, train, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights w = LayerWeights::bind(tape, params, l, cfg.ffn_residual);
    h = attention_block(h, w, cfg, masked_keys, train, rng);
    h = ffn(h, w, cfg, train, rng);
  }
  std::vector<std::size_t> last_rows;
  std::vector<double> non_empty;
  for (std::size_t s = 0; s < windows.size(); ++s) {
    last_rows.push_back(s * L + L - 1);
    non_empty.push_back(windows[s]->valid_len > 0 ? 1.0 : 0.0);
  }
  return numeric::mask_rows(numeric::gather_rows(h, std::move(last_rows)), std::move(non_empty));
}

/// Embeds and encodes a batch of windows against one item table, returning
/// windows.size() x d summary rows.
inline Var encode_views(Tape& tape, ParamSet& params, Var table, std::span<const PaddedWindow* const> windows,
                        const EncoderConfig& cfg, bool train, Rng& rng) {
  Var positions = tape.parameter(params, kPositions);
  Var embedded = embed_with_positions(table, windows, positions);
  return encode_embedded(tape, params, embedded, windows, cfg, train, rng);
}

/// Single-window convenience wrapper; returns a 1 x d row.
inline Var encode_view(Tape& tape, ParamSet& params, Var table, const PaddedWindow& window, const EncoderConfig& cfg,
                       bool train, Rng& rng) {
  const PaddedWindow* w = &window;
  return encode_views(tape, params, table, std::span<const PaddedWindow* const>(&w, 1), cfg, train, rng);
}

}  // namespace mabsrec
