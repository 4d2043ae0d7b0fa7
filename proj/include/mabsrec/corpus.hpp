#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mabsrec/error.hpp"

namespace mabsrec {

/// Dense 1-based item index; 0 is the padding token.
using ItemIndex = std::uint32_t;
using UserIndex = std::uint32_t;
using CategoryIndex = std::uint32_t;

inline constexpr ItemIndex kPadding = 0;
inline constexpr const char* kUnknownCategory = "unknown";

/// Interns opaque string identifiers into dense indices 1..size().
class Vocabulary {
 public:
  std::uint32_t intern(std::string_view token) {
    auto it = index_.find(std::string(token));
    if (it != index_.end()) return it->second;
    tokens_.emplace_back(token);
    const auto idx = static_cast<std::uint32_t>(tokens_.size());
    index_.emplace(tokens_.back(), idx);
    return idx;
  }

  std::optional<std::uint32_t> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(std::uint32_t index) const {
    if (index == 0 || index > tokens_.size()) throw InvalidArgument("vocabulary index " + std::to_string(index) + " out of range");
    return tokens_[index - 1];
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  /// Two-column mapping, one `index<TAB>token` line per entry.
  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].find_first_of("\t\n\r") != std::string::npos) {
        throw InvalidArgument("identifier '" + tokens_[i] + "' contains a tab or newline");
      }
      out += std::to_string(i + 1);
      out += '\t';
      out += tokens_[i];
      out += '\n';
    }
    return out;
  }

  static Vocabulary parse(std::istream& in, const std::string& name) {
    Vocabulary v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError(name, line_no, "expected 'index<TAB>token'");
      std::uint32_t idx = 0;
      auto [p, ec] = std::from_chars(line.data(), line.data() + tab, idx);
      if (ec != std::errc() || p != line.data() + tab) throw ParseError(name, line_no, "bad index");
      if (idx != v.size() + 1) throw ParseError(name, line_no, "indices must be consecutive from 1");
      if (v.find(line.substr(tab + 1))) throw ParseError(name, line_no, "duplicate token");
      v.intern(line.substr(tab + 1));
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Interaction {
  UserIndex user = 0;
  ItemIndex item = 0;
  std::int64_t timestamp = 0;
};

/// All events in input-file order plus the interned vocabularies.
struct InteractionLog {
  Vocabulary users;
  Vocabulary items;
  Vocabulary categories;
  std::vector<Interaction> events;
  /// Indexed by item; entry 0 (padding) is empty. Every real item has >= 1 category.
  std::vector<std::vector<CategoryIndex>> item_categories{{}};
};

enum class InputFormat { csv_events, movielens_ratings };

inline InputFormat parse_input_format(std::string_view s) {
  if (s == "csv_events") return InputFormat::csv_events;
  if (s == "movielens_ratings") return InputFormat::movielens_ratings;
  throw InvalidArgument("unknown input format '" + std::string(s) + "' (expected csv_events or movielens_ratings)");
}

inline std::string to_string(InputFormat f) {
  return f == InputFormat::csv_events ? "csv_events" : "movielens_ratings";
}

namespace detail {

/// Splits one CSV record; double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return in;
}

inline void expect_header(std::istream& in, const std::string& path, std::string_view header) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 1, "empty file, expected header '" + std::string(header) + "'");
  if (trim(line) != header) throw ParseError(path, 1, "expected header '" + std::string(header) + "'");
}

inline std::int64_t parse_timestamp(std::string_view s, const std::string& path, std::size_t line) {
  s = trim(s);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ParseError(path, line, "timestamp '" + std::string(s) + "' is not an integer");
  return v;
}

inline void add_categories(InteractionLog& log, ItemIndex item, const std::vector<std::string>& names) {
  if (log.item_categories.size() <= item) log.item_categories.resize(item + 1);
  auto& cats = log.item_categories[item];
  for (const auto& raw : names) {
    const auto name = trim(raw);
    if (name.empty()) continue;
    const CategoryIndex c = log.categories.intern(name);
    if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
  }
}

inline void finalize_categories(InteractionLog& log) {
  log.item_categories.resize(log.items.size() + 1);
  for (std::size_t i = 1; i < log.item_categories.size(); ++i) {
    if (log.item_categories[i].empty()) log.item_categories[i].push_back(log.categories.intern(kUnknownCategory));
  }
}

}  // namespace detail

/// Reads an interaction file. For `movielens_ratings`, `movies_path` (when
/// given) is a `movieId,title,genres` sidecar whose genres become categories.
/// Items without categories get the singleton "unknown" category.
inline InteractionLog load_interactions(const std::string& path, InputFormat format,
                                        const std::optional<std::string>& movies_path = std::nullopt) {
  InteractionLog log;
  auto in = detail::open_input(path);
  const bool events = format == InputFormat::csv_events;
  detail::expect_header(in, path, events ? "user_id,item_id,timestamp,categories" : "userId,movieId,rating,timestamp");

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv(line);
    std::string_view user, item, ts;
    if (events) {
      if (fields.size() != 3 && fields.size() != 4) throw ParseError(path, line_no, "expected 4 fields, got " + std::to_string(fields.size()));
      user = detail::trim(fields[0]);
      item = detail::trim(fields[1]);
      ts = fields[2];
    } else {
      if (fields.size() != 4) throw ParseError(path, line_no, "expected 4 fields, got " + std::to_string(fields.size()));
      user = detail::trim(fields[0]);
      item = detail::trim(fields[1]);
      ts = fields[3];
    }
    if (user.empty()) throw ParseError(path, line_no, "empty user id");
    if (item.empty()) throw ParseError(path, line_no, "empty item id");
    Interaction ev;
    ev.timestamp = detail::parse_timestamp(ts, path, line_no);
    ev.user = log.users.intern(user);
    ev.item = log.items.intern(item);
    if (events) detail::add_categories(log, ev.item, fields.size() == 4 ? detail::split(fields[3], '|') : std::vector<std::string>{});
    log.events.push_back(ev);
  }
  if (log.events.empty()) throw Error("empty_log", "'" + path + "' contains no interactions");

  if (!events && movies_path) {
    auto movies = detail::open_input(*movies_path);
    detail::expect_header(movies, *movies_path, "movieId,title,genres");
    std::size_t mline = 1;
    while (std::getline(movies, line)) {
      ++mline;
      if (detail::trim(line).empty()) continue;
      auto fields = detail::split_csv(line);
      if (fields.size() != 3) throw ParseError(*movies_path, mline, "expected 3 fields, got " + std::to_string(fields.size()));
      auto id = log.items.find(detail::trim(fields[0]));
      if (!id) continue;
      detail::add_categories(log, *id, detail::split(fields[2], '|'));
    }
  }
  detail::finalize_categories(log);
  return log;
}

/// Chronological item sequence of one user.
struct UserSequence {
  UserIndex user = 0;
  std::vector<ItemIndex> items;

  std::size_t length() const noexcept { return items.size(); }
  friend bool operator==(const UserSequence&, const UserSequence&) = default;
};

struct SequenceFilterStats {
  std::size_t users_seen = 0;
  std::size_t dropped_short = 0;
  std::size_t dropped_long = 0;
};

/// Groups events per user in timestamp order (ties keep file order), drops
/// sequences shorter than `min_len` and, when `max_keep` is set, drops whole
/// sequences longer than it. Output is ordered by user index.
inline std::vector<UserSequence> build_sequences(const InteractionLog& log, std::size_t min_len = 5,
                                                 std::optional<std::size_t> max_keep = std::nullopt,
                                                 SequenceFilterStats* stats = nullptr) {
  if (min_len < 2) throw InvalidArgument("min_len must be >= 2");
  std::vector<std::vector<const Interaction*>> per_user(log.users.size() + 1);
  for (const auto& ev : log.events) per_user[ev.user].push_back(&ev);

  SequenceFilterStats local;
  std::vector<UserSequence> out;
  for (UserIndex u = 1; u < per_user.size(); ++u) {
    auto& evs = per_user[u];
    if (evs.empty()) continue;
    ++local.users_seen;
    if (evs.size() < min_len) {
      ++local.dropped_short;
      continue;
    }
    if (max_keep && evs.size() > *max_keep) {
      ++local.dropped_long;
      continue;
    }
    std::stable_sort(evs.begin(), evs.end(), [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    UserSequence seq{u, {}};
    seq.items.reserve(evs.size());
    for (const auto* ev : evs) seq.items.push_back(ev->item);
    out.push_back(std::move(seq));
  }
  if (stats) *stats = local;
  if (out.empty()) throw Error("empty_corpus", "all user sequences were filtered out");
  return out;
}

struct LeaveOneOutSplit {
  std::vector<ItemIndex> train;
  ItemIndex valid_target = kPadding;
  ItemIndex test_target = kPadding;
};

inline LeaveOneOutSplit split_leave_one_out(std::span<const ItemIndex> items) {
  if (items.size() < 3) throw InvalidArgument("leave-one-out split needs at least 3 items, got " + std::to_string(items.size()));
  LeaveOneOutSplit s;
  s.train.assign(items.begin(), items.end() - 2);
  s.valid_target = items[items.size() - 2];
  s.test_target = items.back();
  return s;
}

inline LeaveOneOutSplit split_leave_one_out(const UserSequence& seq) { return split_leave_one_out(seq.items); }

/// Fixed-length window, left-padded with 0 so the newest item sits in the last slot.
struct PaddedWindow {
  std::vector<ItemIndex> slots;
  std::size_t valid_len = 0;

  std::size_t length() const noexcept { return slots.size(); }
  std::span<const ItemIndex> items() const noexcept {
    return std::span<const ItemIndex>(slots).subspan(slots.size() - valid_len);
  }
  friend bool operator==(const PaddedWindow&, const PaddedWindow&) = default;
};

inline PaddedWindow pad_truncate(std::span<const ItemIndex> items, std::size_t max_len = 50) {
  if (max_len == 0) throw InvalidArgument("window length must be >= 1");
  PaddedWindow w;
  w.valid_len = std::min(items.size(), max_len);
  w.slots.assign(max_len - w.valid_len, kPadding);
  w.slots.insert(w.slots.end(), items.end() - static_cast<std::ptrdiff_t>(w.valid_len), items.end());
  return w;
}

/// Filtered dataset re-indexed so that only retained users and items occupy
/// the vocabularies.
struct Corpus {
  Vocabulary users;
  Vocabulary items;
  Vocabulary categories;
  std::vector<std::vector<CategoryIndex>> item_categories{{}};
  std::vector<UserSequence> sequences;

  std::size_t n_items() const noexcept { return items.size(); }
  std::size_t n_interactions() const noexcept {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.length();
    return n;
  }
};

/// Re-interns the retained sequences in order of first appearance.
inline Corpus make_corpus(const InteractionLog& log, const std::vector<UserSequence>& sequences) {
  Corpus c;
  for (const auto& seq : sequences) {
    UserSequence out{c.users.intern(log.users.token(seq.user)), {}};
    out.items.reserve(seq.items.size());
    for (ItemIndex old : seq.items) {
      const std::size_t before = c.items.size();
      const ItemIndex idx = c.items.intern(log.items.token(old));
      if (c.items.size() != before) {
        std::vector<CategoryIndex> cats;
        for (CategoryIndex oc : log.item_categories.at(old)) cats.push_back(c.categories.intern(log.categories.token(oc)));
        c.item_categories.push_back(std::move(cats));
      }
      out.items.push_back(idx);
    }
    c.sequences.push_back(std::move(out));
  }
  return c;
}

}  // namespace mabsrec
