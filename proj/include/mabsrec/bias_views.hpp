#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mabsrec/corpus.hpp"
#include "mabsrec/error.hpp"

namespace mabsrec {

/// Exact non-negative fraction num/den, compared by cross-multiplication.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }

  friend bool operator==(const Rational& a, const Rational& b) { return a.num * b.den == b.num * a.den; }
  friend bool operator<(const Rational& a, const Rational& b) { return a.num * b.den < b.num * a.den; }
  friend bool operator>(const Rational& a, const Rational& b) { return b < a; }

  Rational scaled(std::int64_t factor) const { return {num * factor, den}; }
};

/// Per-item occurrence counts (index = item, entry 0 unused).
using PopularityScores = std::vector<std::uint64_t>;

/// Counts occurrences of each item over the given sequences. Callers pass the
/// training prefixes only so held-out targets never leak into the counts.
inline PopularityScores popularity_scores(std::span<const std::vector<ItemIndex>> sequences, std::size_t n_items) {
  PopularityScores counts(n_items + 1, 0);
  for (const auto& seq : sequences) {
    for (ItemIndex i : seq) {
      if (i == kPadding || i > n_items) throw InvalidArgument("item index " + std::to_string(i) + " out of range");
      ++counts[i];
    }
  }
  return counts;
}

inline PopularityScores popularity_scores(const InteractionLog& log) {
  if (log.events.empty()) throw InvalidArgument("popularity_scores: empty log");
  PopularityScores counts(log.items.size() + 1, 0);
  for (const auto& ev : log.events) ++counts[ev.item];
  return counts;
}

using CategoryTable = std::vector<std::vector<CategoryIndex>>;

namespace detail {

inline std::map<CategoryIndex, std::int64_t> category_counts(std::span<const ItemIndex> window_items,
                                                             const CategoryTable& categories) {
  std::map<CategoryIndex, std::int64_t> counts;
  for (ItemIndex i : window_items) {
    if (i == kPadding) continue;
    for (CategoryIndex c : categories.at(i)) ++counts[c];
  }
  return counts;
}

inline Rational subjectivity_from_counts(ItemIndex item, const std::map<CategoryIndex, std::int64_t>& cu,
                                         const CategoryTable& categories) {
  const auto& ci = categories.at(item);
  if (ci.empty()) throw InvalidArgument("item " + std::to_string(item) + " has no category");
  std::int64_t dot = 0;
  for (CategoryIndex c : ci) {
    auto it = cu.find(c);
    if (it != cu.end()) dot += it->second;
  }
  return {dot, static_cast<std::int64_t>(ci.size())};
}

}  // namespace detail

/// Category-affinity weight of `item` within a window: the dot product of the
/// item's category indicator with the window's category occurrence counts,
/// divided by the item's category count.
inline Rational subjectivity_score(std::span<const ItemIndex> window_items, ItemIndex item, const CategoryTable& categories) {
  return detail::subjectivity_from_counts(item, detail::category_counts(window_items, categories), categories);
}

/// Subjectivity of every distinct non-padding item of the window.
inline std::map<ItemIndex, Rational> window_subjectivity(std::span<const ItemIndex> window_items, const CategoryTable& categories) {
  const auto cu = detail::category_counts(window_items, categories);
  std::map<ItemIndex, Rational> out;
  for (ItemIndex i : window_items) {
    if (i == kPadding || out.count(i)) continue;
    out.emplace(i, detail::subjectivity_from_counts(i, cu, categories));
  }
  return out;
}

/// Three order-preserving sub-sequences of one window.
struct BiasPartition {
  std::vector<ItemIndex> popular;
  std::vector<ItemIndex> subjective;
  std::vector<ItemIndex> debiased;

  friend bool operator==(const BiasPartition&, const BiasPartition&) = default;
};

enum class BiasView : std::size_t { popular = 0, subjective = 1, debiased = 2 };
inline constexpr std::size_t kNumViews = 3;
inline constexpr const char* kViewNames[kNumViews] = {"popular", "subjective", "debiased"};

inline const std::vector<ItemIndex>& view_items(const BiasPartition& p, std::size_t view) {
  switch (view) {
    case 0: return p.popular;
    case 1: return p.subjective;
    case 2: return p.debiased;
  }
  throw InvalidArgument("view index out of range");
}

/// Size of the "high" group for fraction k over n distinct items: ceil(k*n).
/// The epsilon absorbs representation error in products such as 0.1*30.
inline std::size_t top_count(double k, std::size_t n) {
  const double raw = std::ceil(k * static_cast<double>(n) - 1e-9);
  return static_cast<std::size_t>(std::clamp(raw, 0.0, static_cast<double>(n)));
}

/// Splits the window's items into popular (globally frequent, personally
/// weak), subjective (globally infrequent, personally strong) and debiased
/// (everything else). Distinct items are ranked by descending score with ties
/// going to the smaller item index; "high" means within the top ceil(k*n).
template <class PopScore, class SubjScore>
BiasPartition partition_sequence(std::span<const ItemIndex> window_items, PopScore&& popularity, SubjScore&& subjectivity,
                                 double k_pop, double k_subj) {
  if (!(k_pop >= 0.0 && k_pop <= 1.0) || !(k_subj >= 0.0 && k_subj <= 1.0)) {
    throw InvalidArgument("k_pop and k_subj must lie in [0,1]");
  }
  std::vector<ItemIndex> distinct;
  for (ItemIndex i : window_items) {
    if (i != kPadding && std::find(distinct.begin(), distinct.end(), i) == distinct.end()) distinct.push_back(i);
  }
  const std::size_t n = distinct.size();

  auto high_set = [&](auto&& score, double k) {
    std::vector<ItemIndex> order = distinct;
    std::sort(order.begin(), order.end(), [&](ItemIndex a, ItemIndex b) {
      const auto sa = score(a);
      const auto sb = score(b);
      if (sa > sb) return true;
      if (sb > sa) return false;
      return a < b;
    });
    order.resize(top_count(k, n));
    std::sort(order.begin(), order.end());
    return order;
  };
  const auto pop_high = high_set(popularity, k_pop);
  const auto subj_high = high_set(subjectivity, k_subj);

  BiasPartition out;
  for (ItemIndex i : window_items) {
    if (i == kPadding) continue;
    const bool p = std::binary_search(pop_high.begin(), pop_high.end(), i);
    const bool a = std::binary_search(subj_high.begin(), subj_high.end(), i);
    if (p && !a) out.popular.push_back(i);
    else if (!p && a) out.subjective.push_back(i);
    else out.debiased.push_back(i);
  }
  return out;
}

inline BiasPartition partition_sequence(const PaddedWindow& window, const PopularityScores& popularity,
                                        const std::map<ItemIndex, Rational>& subjectivity, double k_pop, double k_subj) {
  return partition_sequence(
      window.items(), [&](ItemIndex i) { return popularity.at(i); },
      [&](ItemIndex i) {
        auto it = subjectivity.find(i);
        if (it == subjectivity.end()) throw InvalidArgument("no subjectivity score for item " + std::to_string(i));
        return it->second;
      },
      k_pop, k_subj);
}

/// Scores and partitions one window in a single call.
inline BiasPartition partition_window(const PaddedWindow& window, const PopularityScores& popularity,
                                      const CategoryTable& categories, double k_pop, double k_subj) {
  return partition_sequence(window, popularity, window_subjectivity(window.items(), categories), k_pop, k_subj);
}

/// Debug dump line: `user<TAB>popular<TAB>subjective<TAB>debiased`, items space-separated.
inline std::string format_partition(UserIndex user, const BiasPartition& p) {
  auto join = [](const std::vector<ItemIndex>& xs) {
    std::string s;
    for (std::size_t k = 0; k < xs.size(); ++k) s += (k ? " " : "") + std::to_string(xs[k]);
    return s;
  };
  return std::to_string(user) + '\t' + join(p.popular) + '\t' + join(p.subjective) + '\t' + join(p.debiased);
}

}  // namespace mabsrec
