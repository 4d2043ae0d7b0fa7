#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mabsrec/config.hpp"
#include "mabsrec/error.hpp"
#include "mabsrec/model.hpp"

namespace mabsrec {

/// 1 when `target` is among the first `n` ranked items.
inline double recall_at_n(std::span<const ItemIndex> ranked, ItemIndex target, std::size_t n) {
  if (ranked.empty()) throw InvalidArgument("recall_at_n: empty ranking");
  if (n == 0) throw InvalidArgument("recall_at_n: N must be >= 1");
  const auto limit = std::min(n, ranked.size());
  return std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(limit), target) !=
                 ranked.begin() + static_cast<std::ptrdiff_t>(limit)
             ? 1.0
             : 0.0;
}

/// Single-relevant-item NDCG: 1/log2(rank+1) within the cutoff (ideal DCG is 1).
inline double ndcg_at_n(std::span<const ItemIndex> ranked, ItemIndex target, std::size_t n) {
  if (ranked.empty()) throw InvalidArgument("ndcg_at_n: empty ranking");
  if (n == 0) throw InvalidArgument("ndcg_at_n: N must be >= 1");
  const auto limit = std::min(n, ranked.size());
  for (std::size_t r = 0; r < limit; ++r) {
    if (ranked[r] == target) return 1.0 / std::log2(static_cast<double>(r + 2));
  }
  return 0.0;
}

/// Ranks items 1..n (logits[j] belongs to item j+1) by descending score, ties
/// broken by ascending item index, skipping `excluded` items.
inline std::vector<ItemIndex> rank_items(std::span<const double> logits, std::span<const ItemIndex> excluded = {}) {
  std::vector<ItemIndex> order;
  order.reserve(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const auto item = static_cast<ItemIndex>(j + 1);
    if (std::find(excluded.begin(), excluded.end(), item) == excluded.end()) order.push_back(item);
  }
  std::stable_sort(order.begin(), order.end(), [&](ItemIndex a, ItemIndex b) { return logits[a - 1] > logits[b - 1]; });
  return order;
}

/// 1-based position of `target` under rank_items() ordering, without sorting.
inline std::size_t target_rank(std::span<const double> logits, ItemIndex target, std::span<const ItemIndex> excluded = {}) {
  if (target == kPadding || target > logits.size()) throw InvalidArgument("target_rank: target out of range");
  const double t = logits[target - 1];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const auto item = static_cast<ItemIndex>(j + 1);
    if (item == target) continue;
    if (logits[j] > t || (logits[j] == t && item < target)) {
      if (std::find(excluded.begin(), excluded.end(), item) == excluded.end()) ++rank;
    }
  }
  return rank;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10"};
  return names;
}

/// Running sums of per-user metrics from target ranks.
class MetricAccumulator {
 public:
  void add_rank(std::size_t rank) {
    ++users_;
    sums_[0] += rank <= 1 ? 1.0 : 0.0;
    sums_[1] += rank <= 5 ? 1.0 : 0.0;
    sums_[2] += rank <= 10 ? 1.0 : 0.0;
    sums_[3] += rank <= 5 ? 1.0 / std::log2(static_cast<double>(rank + 1)) : 0.0;
    sums_[4] += rank <= 10 ? 1.0 / std::log2(static_cast<double>(rank + 1)) : 0.0;
  }

  std::size_t users() const noexcept { return users_; }

  std::map<std::string, double> metrics() const {
    std::map<std::string, double> out;
    for (std::size_t k = 0; k < metric_names().size(); ++k) {
      out[metric_names()[k]] = users_ ? sums_[k] / static_cast<double>(users_) : 0.0;
    }
    return out;
  }

 private:
  std::size_t users_ = 0;
  std::array<double, 5> sums_{};
};

struct EvalReport {
  struct Bucket {
    std::size_t lo = 0;
    /// Exclusive upper bound; nullopt for the open-ended last bucket.
    std::optional<std::size_t> hi;
    std::size_t users = 0;
    std::map<std::string, double> metrics;

    std::string label() const {
      return hi ? std::to_string(lo) + "-" + std::to_string(*hi) : std::to_string(lo) + "+";
    }
  };

  std::size_t users = 0;
  std::map<std::string, double> metrics;
  std::vector<Bucket> buckets;
  std::map<std::string, std::string> metadata;

  double at(const std::string& name) const { return metrics.at(name); }
};

inline const std::vector<std::size_t>& default_bucket_edges() {
  static const std::vector<std::size_t> edges{5, 10, 20, 50};
  return edges;
}

/// Per-user fusion scores (s_P, s_A, s_D).
struct ScoreTriple {
  UserIndex user = 0;
  std::array<double, 3> scores{};
};

/// Full-vocabulary ranking evaluation of `examples` with dropout off.
/// Bucket edges e_0 < e_1 < ... produce buckets [e_0,e_1), ..., [e_last, inf).
inline EvalReport evaluate(ParamSet& params, const ModelGraphs& graphs, std::span<const Example> examples,
                           const TrainConfig& cfg, const std::vector<std::size_t>& bucket_edges = {},
                           std::vector<ScoreTriple>* score_sink = nullptr) {
  for (std::size_t k = 1; k < bucket_edges.size(); ++k) {
    if (bucket_edges[k] <= bucket_edges[k - 1]) throw InvalidArgument("bucket edges must be strictly increasing");
  }
  MetricAccumulator overall;
  std::vector<MetricAccumulator> per_bucket(bucket_edges.size());
  Rng unused(0);
  for (std::size_t start = 0; start < examples.size(); start += cfg.micro_batch) {
    const std::size_t end = std::min(examples.size(), start + cfg.micro_batch);
    std::vector<const Example*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&examples[i]);
    Tape tape(false);
    const ForwardOutput out = forward_batch(tape, params, graphs, batch, cfg, false, unused);
    const Tensor& logits = out.logits.value();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Example& ex = *batch[b];
      std::vector<ItemIndex> excluded;
      if (cfg.filter_seen) {
        for (ItemIndex i : ex.history)
          if (i != ex.target) excluded.push_back(i);
      }
      const std::size_t rank = target_rank(logits.row(b), ex.target, excluded);
      overall.add_rank(rank);
      for (std::size_t k = bucket_edges.size(); k-- > 0;) {
        if (ex.sequence_length >= bucket_edges[k]) {
          per_bucket[k].add_rank(rank);
          break;
        }
      }
      if (score_sink && out.scores.valid()) {
        const Tensor& s = out.scores.value();
        score_sink->push_back({ex.user, {s(b, 0), s(b, 1), s(b, 2)}});
      }
    }
  }
  EvalReport report;
  report.users = overall.users();
  report.metrics = overall.metrics();
  for (std::size_t k = 0; k < bucket_edges.size(); ++k) {
    EvalReport::Bucket bucket;
    bucket.lo = bucket_edges[k];
    if (k + 1 < bucket_edges.size()) bucket.hi = bucket_edges[k + 1];
    bucket.users = per_bucket[k].users();
    bucket.metrics = per_bucket[k].metrics();
    report.buckets.push_back(std::move(bucket));
  }
  return report;
}

namespace detail {
inline std::string fmt_metric(double v) {
  std::ostringstream os;
  os.precision(10);
  os << std::fixed << v;
  return os.str();
}
}  // namespace detail

/// Nested key-value document:
///
///   report {
///     <metadata key> = <value>
///     overall { users = N  <metric> = <value> ... }
///     bucket lo-hi { ... }      (half-open [lo,hi); the last one is "lo+")
///   }
inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os << "report {\n";
  for (const auto& [k, v] : r.metadata) os << "  " << k << " = " << v << '\n';
  auto block = [&](const std::string& head, std::size_t users, const std::map<std::string, double>& metrics) {
    os << "  " << head << " {\n    users = " << users << '\n';
    for (const auto& name : metric_names()) os << "    " << name << " = " << detail::fmt_metric(metrics.at(name)) << '\n';
    os << "  }\n";
  };
  block("overall", r.users, r.metrics);
  for (const auto& b : r.buckets) block("bucket " + b.label(), b.users, b.metrics);
  os << "}\n";
  return os.str();
}

/// Flat CSV (header + one row) for sweep aggregation.
inline std::string to_csv(const EvalReport& r) {
  std::ostringstream head, row;
  bool first = true;
  auto cell = [&](const std::string& k, const std::string& v) {
    head << (first ? "" : ",") << k;
    row << (first ? "" : ",") << v;
    first = false;
  };
  for (const auto& [k, v] : r.metadata) cell(k, v);
  cell("users", std::to_string(r.users));
  for (const auto& name : metric_names()) cell(name, detail::fmt_metric(r.metrics.at(name)));
  for (const auto& b : r.buckets) {
    cell(b.label() + ".users", std::to_string(b.users));
    for (const auto& name : metric_names()) cell(b.label() + "." + name, detail::fmt_metric(b.metrics.at(name)));
  }
  return head.str() + "\n" + row.str() + "\n";
}

}  // namespace mabsrec
