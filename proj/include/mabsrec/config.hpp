#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "mabsrec/error.hpp"

namespace mabsrec {

enum class Ablation { full, wo_G, wo_A, wo_D };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::wo_G: return "wo_G";
    case Ablation::wo_A: return "wo_A";
    case Ablation::wo_D: return "wo_D";
  }
  return "full";
}

inline Ablation parse_ablation(std::string_view s) {
  if (s == "full") return Ablation::full;
  if (s == "wo_G") return Ablation::wo_G;
  if (s == "wo_A") return Ablation::wo_A;
  if (s == "wo_D") return Ablation::wo_D;
  throw InvalidArgument("unknown ablation '" + std::string(s) + "' (expected full, wo_G, wo_A or wo_D)");
}

/// Graph-free variants replace every view's graph-enriched table with the raw
/// item embeddings.
inline bool uses_graph(Ablation a) { return a == Ablation::full || a == Ablation::wo_A; }
/// Fusion-free variants average the three view encodings instead.
inline bool uses_fusion(Ablation a) { return a == Ablation::full || a == Ablation::wo_G; }

/// Every knob of a training run. Defaults follow the Amazon Beauty settings.
struct TrainConfig {
  std::size_t batch_size = 512;
  double learning_rate = 0.001;
  std::size_t max_seq_len = 50;
  double dropout_rate = 0.4;
  std::size_t n_transformer_layers = 2;
  std::size_t n_heads = 1;
  std::size_t n_graph_layers = 2;
  double graph_dropout_rate = 0.4;
  std::size_t embed_dim = 64;
  double k_pop = 0.5;
  double k_subj = 0.5;
  std::size_t patience = 10;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 42;
  Ablation ablation = Ablation::full;

  // Users per forward/backward pass inside one optimizer batch.
  std::size_t micro_batch = 64;
  bool causal_mask = true;
  bool mask_padding = false;
  bool ffn_residual = true;
  bool fusion_triple_sum = false;
  bool per_position_targets = false;
  bool score_against_graph_embeddings = false;
  bool filter_seen = false;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw InvalidArgument(std::string(name) + " must be >= 1");
    };
    auto rate = [](double v, const char* name) {
      if (!(v >= 0.0 && v < 1.0)) throw InvalidArgument(std::string(name) + " must lie in [0,1)");
    };
    auto fraction = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument(std::string(name) + " must lie in [0,1]");
    };
    positive(batch_size, "batch-size");
    positive(max_seq_len, "max-seq-len");
    positive(n_transformer_layers, "transformer-layers");
    positive(n_heads, "heads");
    positive(n_graph_layers, "graph-layers");
    positive(embed_dim, "embed-dim");
    positive(patience, "patience");
    positive(max_epochs, "max-epochs");
    positive(micro_batch, "micro-batch");
    rate(dropout_rate, "dropout");
    rate(graph_dropout_rate, "graph-dropout");
    fraction(k_pop, "k-pop");
    fraction(k_subj, "k-subj");
    if (!(learning_rate >= 0.0)) throw InvalidArgument("learning-rate must be >= 0");
    if (embed_dim % n_heads != 0) throw InvalidArgument("embed-dim must be divisible by heads");
  }
};

/// Table-of-settings presets per dataset.
inline TrainConfig preset_config(std::string_view dataset) {
  TrainConfig c;
  if (dataset == "beauty") return c;
  if (dataset == "sports") {
    c.graph_dropout_rate = 0.5;
    return c;
  }
  if (dataset == "ml20m") {
    c.dropout_rate = 0.1;
    c.n_transformer_layers = 4;
    c.n_heads = 8;
    c.n_graph_layers = 4;
    c.graph_dropout_rate = 0.3;
    return c;
  }
  throw InvalidArgument("unknown preset '" + std::string(dataset) + "' (expected beauty, sports or ml20m)");
}

namespace detail {

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw InvalidArgument("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw InvalidArgument("config key '" + std::string(key) + "': expected true/false, got '" + std::string(text) + "'");
}

}  // namespace detail

/// Ordered `key = value` lines; the same keys the CLI accepts as flags.
inline std::string to_kv(const TrainConfig& c) {
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "batch-size = " << c.batch_size << '\n'
     << "learning-rate = " << detail::format_real(c.learning_rate) << '\n'
     << "max-seq-len = " << c.max_seq_len << '\n'
     << "dropout = " << detail::format_real(c.dropout_rate) << '\n'
     << "transformer-layers = " << c.n_transformer_layers << '\n'
     << "heads = " << c.n_heads << '\n'
     << "graph-layers = " << c.n_graph_layers << '\n'
     << "graph-dropout = " << detail::format_real(c.graph_dropout_rate) << '\n'
     << "embed-dim = " << c.embed_dim << '\n'
     << "k-pop = " << detail::format_real(c.k_pop) << '\n'
     << "k-subj = " << detail::format_real(c.k_subj) << '\n'
     << "patience = " << c.patience << '\n'
     << "max-epochs = " << c.max_epochs << '\n'
     << "seed = " << c.seed << '\n'
     << "ablation = " << to_string(c.ablation) << '\n'
     << "micro-batch = " << c.micro_batch << '\n'
     << "causal-mask = " << b(c.causal_mask) << '\n'
     << "mask-padding = " << b(c.mask_padding) << '\n'
     << "ffn-residual = " << b(c.ffn_residual) << '\n'
     << "fusion-triple-sum = " << b(c.fusion_triple_sum) << '\n'
     << "per-position-targets = " << b(c.per_position_targets) << '\n'
     << "score-against-graph-embeddings = " << b(c.score_against_graph_embeddings) << '\n'
     << "filter-seen = " << b(c.filter_seen) << '\n';
  return os.str();
}

/// Applies one key; returns false for keys that are not TrainConfig fields.
inline bool apply_kv(TrainConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "batch-size") c.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "learning-rate") c.learning_rate = parse_number<double>(key, value);
  else if (key == "max-seq-len") c.max_seq_len = parse_number<std::size_t>(key, value);
  else if (key == "dropout") c.dropout_rate = parse_number<double>(key, value);
  else if (key == "transformer-layers") c.n_transformer_layers = parse_number<std::size_t>(key, value);
  else if (key == "heads") c.n_heads = parse_number<std::size_t>(key, value);
  else if (key == "graph-layers") c.n_graph_layers = parse_number<std::size_t>(key, value);
  else if (key == "graph-dropout") c.graph_dropout_rate = parse_number<double>(key, value);
  else if (key == "embed-dim") c.embed_dim = parse_number<std::size_t>(key, value);
  else if (key == "k-pop") c.k_pop = parse_number<double>(key, value);
  else if (key == "k-subj") c.k_subj = parse_number<double>(key, value);
  else if (key == "patience") c.patience = parse_number<std::size_t>(key, value);
  else if (key == "max-epochs") c.max_epochs = parse_number<std::size_t>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "ablation") c.ablation = parse_ablation(value);
  else if (key == "micro-batch") c.micro_batch = parse_number<std::size_t>(key, value);
  else if (key == "causal-mask") c.causal_mask = parse_bool(key, value);
  else if (key == "mask-padding") c.mask_padding = parse_bool(key, value);
  else if (key == "ffn-residual") c.ffn_residual = parse_bool(key, value);
  else if (key == "fusion-triple-sum") c.fusion_triple_sum = parse_bool(key, value);
  else if (key == "per-position-targets") c.per_position_targets = parse_bool(key, value);
  else if (key == "score-against-graph-embeddings") c.score_against_graph_embeddings = parse_bool(key, value);
  else if (key == "filter-seen") c.filter_seen = parse_bool(key, value);
  else return false;
  return true;
}

/// Parses `key = value` lines; blank lines and `#`/`;` comments are ignored.
inline std::map<std::string, std::string> parse_kv(std::string_view text) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config", line_no, "expected 'key = value'");
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out[trim(line.substr(0, eq))] = value;
  }
  return out;
}

inline TrainConfig config_from_kv(std::string_view text, TrainConfig base = {}) {
  for (const auto& [k, v] : parse_kv(text)) apply_kv(base, k, v);
  return base;
}

/// 64-bit FNV-1a, used for vocabulary and config fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace mabsrec
