#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/rng.hpp"

namespace mabsrec::synthetic {

struct SyntheticSpec {
  std::size_t users = 2000;
  std::size_t items = 1000;
  std::size_t categories = 20;
  std::size_t min_len = 5;
  std::size_t max_len = 40;
  /// Zipf exponent of global item popularity.
  double zipf = 1.0;
  /// Probability that the next item follows the previous one's fixed successor.
  double transition_prob = 0.4;
  /// Probability that a free draw comes from the user's preferred categories.
  double preference_prob = 0.6;
  std::uint64_t seed = 1;
};

/// Beauty-style `user_id,item_id,timestamp,categories` text. Each item has
/// one to three categories, each user two preferred categories, and each item
/// a fixed successor so sequences carry learnable transitions.
inline std::string beauty_format_csv(const SyntheticSpec& spec) {
  if (spec.users == 0 || spec.items < 2 || spec.categories == 0) throw InvalidArgument("synthetic: empty universe");
  if (spec.min_len < 1 || spec.max_len < spec.min_len) throw InvalidArgument("synthetic: need 1 <= min-len <= max-len");
  numeric::Rng rng(spec.seed);

  std::vector<std::vector<std::size_t>> item_cats(spec.items);
  std::vector<std::vector<std::size_t>> by_cat(spec.categories);
  for (std::size_t i = 0; i < spec.items; ++i) {
    const std::size_t k = 1 + rng.next() % 3;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = rng.next() % spec.categories;
      if (std::find(item_cats[i].begin(), item_cats[i].end(), c) == item_cats[i].end()) item_cats[i].push_back(c);
    }
    std::sort(item_cats[i].begin(), item_cats[i].end());
    for (std::size_t c : item_cats[i]) by_cat[c].push_back(i);
  }
  std::vector<std::size_t> successor(spec.items);
  for (auto& s : successor) s = rng.next() % spec.items;

  std::vector<double> cdf(spec.items);
  double total = 0.0;
  for (std::size_t i = 0; i < spec.items; ++i) cdf[i] = total += 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf);
  auto popular_draw = [&] {
    const double r = rng.uniform() * total;
    return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin()) % spec.items;
  };

  std::ostringstream os;
  os << "user_id,item_id,timestamp,categories\n";
  for (std::size_t u = 0; u < spec.users; ++u) {
    const std::size_t pref[2] = {rng.next() % spec.categories, rng.next() % spec.categories};
    const std::size_t len = spec.min_len + rng.next() % (spec.max_len - spec.min_len + 1);
    std::int64_t ts = 1'500'000'000 + static_cast<std::int64_t>(rng.next() % 1'000'000);
    std::size_t prev = popular_draw();
    for (std::size_t k = 0; k < len; ++k) {
      std::size_t item;
      if (k > 0 && rng.uniform() < spec.transition_prob) {
        item = successor[prev];
      } else if (rng.uniform() < spec.preference_prob && !by_cat[pref[k % 2]].empty()) {
        const auto& pool = by_cat[pref[k % 2]];
        item = pool[rng.next() % pool.size()];
      } else {
        item = popular_draw();
      }
      ts += 1 + static_cast<std::int64_t>(rng.next() % 86'400);
      os << 'u' << u + 1 << ",p" << item + 1 << ',' << ts << ',';
      for (std::size_t j = 0; j < item_cats[item].size(); ++j) os << (j ? "|" : "") << "cat" << item_cats[item][j];
      os << '\n';
      prev = item;
    }
  }
  return os.str();
}

/// 50 users over 30 items: user u starts at item (7u mod 30) + 1, walks the
/// cycle i -> i mod 30 + 1 and has 6 + (u mod 5) interactions. Every next item
/// is a function of the previous one, so a model can fit it exactly.
inline std::string memorization_csv() {
  std::ostringstream os;
  os << "user_id,item_id,timestamp,categories\n";
  for (std::size_t u = 0; u < 50; ++u) {
    std::size_t item = (u * 7) % 30 + 1;
    for (std::size_t k = 0; k < 6 + u % 5; ++k) {
      os << 'u' << u << ",i" << item << ',' << 1000 + k << ",c" << item % 4 << '\n';
      item = item % 30 + 1;
    }
  }
  return os.str();
}

}  // namespace mabsrec::synthetic
