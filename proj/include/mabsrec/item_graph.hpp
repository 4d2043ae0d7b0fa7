#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mabsrec/corpus.hpp"
#include "mabsrec/error.hpp"
#include "mabsrec/numeric/kernels.hpp"

namespace mabsrec {

/// Symmetric item-transition counts for one bias view. Keys are (i, j) with
/// both orientations stored.
struct TransitionGraph {
  std::size_t n_items = 0;
  std::map<std::pair<ItemIndex, ItemIndex>, std::uint64_t> entries;

  std::uint64_t weight(ItemIndex i, ItemIndex j) const {
    auto it = entries.find({i, j});
    return it == entries.end() ? 0 : it->second;
  }

  friend bool operator==(const TransitionGraph&, const TransitionGraph&) = default;
};

/// Counts adjacent pairs (positions p, q with |p - q| = 1) in every sequence.
/// Each adjacency adds 1 to (i, j) and 1 to (j, i), so a repeated item a,a
/// adds 2 to the diagonal entry (a, a).
inline TransitionGraph build_adjacency(std::span<const std::vector<ItemIndex>> sequences, std::size_t n_items) {
  TransitionGraph g;
  g.n_items = n_items;
  for (const auto& seq : sequences) {
    for (ItemIndex i : seq) {
      if (i == kPadding || i > n_items) throw InvalidArgument("item index " + std::to_string(i) + " out of range [1, " + std::to_string(n_items) + "]");
    }
    for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
      ++g.entries[{seq[p], seq[p + 1]}];
      ++g.entries[{seq[p + 1], seq[p]}];
    }
  }
  return g;
}

/// D^{-1/2} (A + I) D^{-1/2} stored as an (n_items + 1) square CSR matrix whose
/// padding row and column are empty.
struct NormalizedItemGraph {
  std::size_t n_items = 0;
  std::shared_ptr<const numeric::SparseMatrix> matrix;

  double at(ItemIndex i, ItemIndex j) const { return matrix->at(i, j); }
};

inline NormalizedItemGraph normalize(const TransitionGraph& graph) {
  const std::size_t n = graph.n_items;
  std::vector<double> degree(n + 1, 0.0);
  for (std::size_t i = 1; i <= n; ++i) degree[i] = 1.0;
  for (const auto& [key, w] : graph.entries) degree[key.first] += static_cast<double>(w);

  auto m = std::make_shared<numeric::SparseMatrix>();
  m->rows = m->cols = n + 1;
  m->row_ptr.assign(n + 2, 0);
  auto it = graph.entries.begin();
  for (std::size_t i = 0; i <= n; ++i) {
    bool diagonal_done = (i == 0);
    auto emit = [&](std::size_t j, double a) {
      m->col_idx.push_back(j);
      m->values.push_back(a / std::sqrt(degree[i] * degree[j]));
    };
    for (; it != graph.entries.end() && it->first.first == i; ++it) {
      const std::size_t j = it->first.second;
      if (!diagonal_done && j >= i) {
        emit(i, (j == i ? static_cast<double>(it->second) : 0.0) + 1.0);
        diagonal_done = true;
        if (j == i) continue;
      }
      if (it->second != 0) emit(j, static_cast<double>(it->second));
    }
    if (!diagonal_done) emit(i, 1.0);
    m->row_ptr[i + 1] = m->values.size();
  }
  return {n, std::move(m)};
}

/// Number of propagate() calls made by this process, used to witness that the
/// graph-free ablations never touch the graph path.
inline std::atomic<std::uint64_t>& propagation_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Activation-free message passing: X(l+1) = S X(l), returning the mean of
/// X(1)..X(layers). The raw X(0) is not part of the mean.
inline numeric::Var propagate(numeric::Var x0, const NormalizedItemGraph& graph, std::size_t layers) {
  if (layers == 0) throw InvalidArgument("propagate: layer count must be >= 1");
  if (x0.value().rows() != graph.n_items + 1) {
    throw ShapeError("propagate: embedding has " + std::to_string(x0.value().rows()) + " rows, graph expects " +
                     std::to_string(graph.n_items + 1));
  }
  ++propagation_counter();
  std::vector<numeric::Var> outputs;
  numeric::Var x = x0;
  for (std::size_t l = 0; l < layers; ++l) {
    x = numeric::spmm(graph.matrix, x);
    outputs.push_back(x);
  }
  return layers == 1 ? outputs.front() : numeric::mean_of(outputs);
}

/// Edge-list text: a `# n_items N` header, then `i j weight` for i <= j.
inline std::string export_edges(const TransitionGraph& g) {
  std::ostringstream os;
  os << "# n_items " << g.n_items << '\n';
  for (const auto& [key, w] : g.entries) {
    if (key.first <= key.second) os << key.first << ' ' << key.second << ' ' << w << '\n';
  }
  return os.str();
}

inline TransitionGraph import_edges(std::istream& in, const std::string& name) {
  TransitionGraph g;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key;
      ls >> hash >> key >> g.n_items;
      if (key != "n_items" || !ls) throw ParseError(name, line_no, "expected '# n_items N'");
      have_header = true;
      continue;
    }
    if (!have_header) throw ParseError(name, line_no, "missing '# n_items N' header");
    std::uint64_t i = 0, j = 0, w = 0;
    if (!(ls >> i >> j >> w)) throw ParseError(name, line_no, "expected 'i j weight'");
    if (i == 0 || j == 0 || i > g.n_items || j > g.n_items) throw ParseError(name, line_no, "item index out of range");
    g.entries[{static_cast<ItemIndex>(i), static_cast<ItemIndex>(j)}] = w;
    g.entries[{static_cast<ItemIndex>(j), static_cast<ItemIndex>(i)}] = w;
  }
  if (!have_header) throw ParseError(name, line_no, "missing '# n_items N' header");
  return g;
}

}  // namespace mabsrec
