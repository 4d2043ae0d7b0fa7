#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mabsrec/error.hpp"
#include "mabsrec/evaluator.hpp"
#include "test_support.hpp"

namespace mabsrec {
namespace {

std::vector<ItemIndex> iota_items(std::size_t n) {
  std::vector<ItemIndex> v(n);
  std::iota(v.begin(), v.end(), ItemIndex{1});
  return v;
}

/// Logits over n items that put `target` at 1-based `rank`, other items in random order.
std::vector<double> planted_logits(std::size_t n, ItemIndex target, std::size_t rank, Rng& rng) {
  std::vector<ItemIndex> others;
  for (ItemIndex i = 1; i <= n; ++i)
    if (i != target) others.push_back(i);
  for (std::size_t k = others.size(); k > 1; --k) std::swap(others[k - 1], others[rng.next() % k]);
  others.insert(others.begin() + static_cast<std::ptrdiff_t>(rank - 1), target);
  std::vector<double> logits(n);
  for (std::size_t pos = 0; pos < n; ++pos) logits[others[pos] - 1] = static_cast<double>(n - pos);
  return logits;
}

TEST(Recall, HitAndMissBoundary) {
  const auto ranked = iota_items(20);
  EXPECT_EQ(recall_at_n(ranked, 1, 1), 1.0);
  EXPECT_EQ(recall_at_n(ranked, 11, 10), 0.0);
  EXPECT_EQ(recall_at_n(ranked, 10, 10), 1.0);
  EXPECT_EQ(recall_at_n(ranked, 3, 50), 1.0);
}

TEST(Recall, Errors) {
  EXPECT_THROW(recall_at_n(std::vector<ItemIndex>{}, 1, 1), InvalidArgument);
  EXPECT_THROW(recall_at_n(iota_items(3), 1, 0), InvalidArgument);
}

TEST(Ndcg, ClosedFormValues) {
  const auto ranked = iota_items(10);
  EXPECT_EQ(ndcg_at_n(ranked, 1, 1), 1.0);
  EXPECT_EQ(ndcg_at_n(ranked, 3, 5), 0.5);
  EXPECT_EQ(ndcg_at_n(ranked, 3, 3), 0.5);
  EXPECT_EQ(ndcg_at_n(ranked, 6, 5), 0.0);
  EXPECT_DOUBLE_EQ(ndcg_at_n(ranked, 2, 5), 1.0 / std::log2(3.0));
  EXPECT_THROW(ndcg_at_n(std::vector<ItemIndex>{}, 1, 1), InvalidArgument);
  EXPECT_THROW(ndcg_at_n(ranked, 1, 0), InvalidArgument);
}

TEST(Ranking, TiesBreakTowardSmallerIndex) {
  const std::vector<double> logits{0.5, 2.0, 0.5, 2.0, -1.0};
  EXPECT_EQ(rank_items(logits), (std::vector<ItemIndex>{2, 4, 1, 3, 5}));
  EXPECT_EQ(target_rank(logits, 4), 2u);
  EXPECT_EQ(target_rank(logits, 3), 4u);
  EXPECT_EQ(rank_items(logits, std::vector<ItemIndex>{2}), (std::vector<ItemIndex>{4, 1, 3, 5}));
  EXPECT_THROW(target_rank(logits, 0), InvalidArgument);
  EXPECT_THROW(target_rank(logits, 6), InvalidArgument);
}

TEST(Ranking, TargetRankAgreesWithSortedOrder) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(30);
    for (double& v : logits) v = static_cast<double>(rng.next() % 6);
    std::vector<ItemIndex> excluded;
    for (int k = 0; k < 5; ++k) excluded.push_back(static_cast<ItemIndex>(1 + rng.next() % 30));
    const auto target = static_cast<ItemIndex>(1 + rng.next() % 30);
    std::erase(excluded, target);
    const auto ranked = rank_items(logits, excluded);
    const auto pos = std::find(ranked.begin(), ranked.end(), target) - ranked.begin();
    EXPECT_EQ(target_rank(logits, target, excluded), static_cast<std::size_t>(pos + 1));
  }
}

TEST(Metrics, PlantedRankOracle) {
  Rng rng(5);
  const std::size_t n = 50;
  MetricAccumulator acc;
  std::map<std::size_t, std::size_t> hits;
  double ndcg10 = 0.0, ndcg5 = 0.0;
  for (int u = 0; u < 100; ++u) {
    const auto target = static_cast<ItemIndex>(1 + rng.next() % n);
    const std::size_t planted = 1 + rng.next() % 20;
    const auto logits = planted_logits(n, target, planted, rng);
    const auto ranked = rank_items(logits);
    ASSERT_EQ(ranked[planted - 1], target);
    ASSERT_EQ(target_rank(logits, target), planted);
    acc.add_rank(target_rank(logits, target));
    for (std::size_t cut : {1u, 5u, 10u}) {
      EXPECT_EQ(recall_at_n(ranked, target, cut), planted <= cut ? 1.0 : 0.0);
      if (planted <= cut) ++hits[cut];
    }
    ndcg5 += ndcg_at_n(ranked, target, 5);
    ndcg10 += ndcg_at_n(ranked, target, 10);
    if (planted <= 10) {
      EXPECT_EQ(ndcg_at_n(ranked, target, 10), 1.0 / std::log2(planted + 1.0));
    }
  }
  const auto m = acc.metrics();
  EXPECT_EQ(m.at("recall@1"), hits[1] / 100.0);
  EXPECT_EQ(m.at("recall@5"), hits[5] / 100.0);
  EXPECT_EQ(m.at("recall@10"), hits[10] / 100.0);
  EXPECT_EQ(m.at("ndcg@5"), ndcg5 / 100.0);
  EXPECT_EQ(m.at("ndcg@10"), ndcg10 / 100.0);
}

TEST(Metrics, PerfectRankingScoresOne) {
  MetricAccumulator acc;
  Rng rng(6);
  for (int u = 0; u < 30; ++u) {
    const auto target = static_cast<ItemIndex>(1 + rng.next() % 40);
    acc.add_rank(target_rank(planted_logits(40, target, 1, rng), target));
  }
  for (const auto& [name, v] : acc.metrics()) EXPECT_EQ(v, 1.0) << name;
}

TEST(Metrics, MonotoneInCutoffAndNdcgBoundedByRecall) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const auto ranked = iota_items(25);
    const auto target = static_cast<ItemIndex>(1 + rng.next() % 25);
    double prev_r = 0.0, prev_n = 0.0;
    for (std::size_t cut = 1; cut <= 25; ++cut) {
      const double r = recall_at_n(ranked, target, cut), g = ndcg_at_n(ranked, target, cut);
      EXPECT_GE(r, prev_r);
      EXPECT_GE(g, prev_n);
      EXPECT_LE(g, r);
      EXPECT_GE(g, 0.0);
      EXPECT_LE(r, 1.0);
      prev_r = r;
      prev_n = g;
    }
  }
}

struct RandomModel {
  TrainConfig cfg;
  TrainingData data;
  ParamSet params;
};

RandomModel random_model(std::size_t users, std::size_t items, std::uint64_t seed) {
  RandomModel m;
  m.cfg = testing::toy_config();
  m.cfg.micro_batch = 256;
  m.data = build_training_data(testing::random_corpus(users, items, 5, 70, seed), m.cfg);
  m.params = init_model_params(m.data.n_items, m.cfg);
  return m;
}

TEST(Evaluate, RandomModelRecallMatchesUniformRate) {
  RandomModel m = random_model(1500, 100, 21);
  ASSERT_EQ(m.data.n_items, 100u);
  const auto r = evaluate(m.params, m.data.graphs, m.data.test, m.cfg);
  const double p = 10.0 / 100.0, n = static_cast<double>(r.users);
  EXPECT_EQ(r.users, 1500u);
  EXPECT_NEAR(r.at("recall@10"), p, 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Evaluate, ReportInvariants) {
  RandomModel m = random_model(300, 40, 22);
  for (bool filter : {false, true}) {
    m.cfg.filter_seen = filter;
    const auto r = evaluate(m.params, m.data.graphs, m.data.valid, m.cfg, default_bucket_edges());
    EXPECT_LE(r.at("recall@1"), r.at("recall@5"));
    EXPECT_LE(r.at("recall@5"), r.at("recall@10"));
    EXPECT_LE(r.at("ndcg@5"), r.at("ndcg@10"));
    EXPECT_LE(r.at("ndcg@10"), r.at("recall@10"));
    for (const auto& [k, v] : r.metrics) {
      EXPECT_GE(v, 0.0) << k;
      EXPECT_LE(v, 1.0) << k;
    }
  }
}

TEST(Evaluate, BucketWeightedMeanEqualsOverall) {
  RandomModel m = random_model(400, 40, 23);
  const auto r = evaluate(m.params, m.data.graphs, m.data.test, m.cfg, default_bucket_edges());
  ASSERT_EQ(r.buckets.size(), 4u);
  EXPECT_EQ(r.buckets[0].label(), "5-10");
  EXPECT_EQ(r.buckets[3].label(), "50+");
  std::size_t total = 0;
  for (const auto& name : metric_names()) {
    double weighted = 0.0;
    total = 0;
    for (const auto& b : r.buckets) {
      weighted += b.metrics.at(name) * static_cast<double>(b.users);
      total += b.users;
    }
    EXPECT_NEAR(weighted / static_cast<double>(total), r.at(name), 1e-12) << name;
  }
  EXPECT_EQ(total, r.users);
  for (const auto& b : r.buckets) EXPECT_GT(b.users, 0u) << b.label();
}

TEST(Evaluate, BucketsGroupByFullSequenceLength) {
  RandomModel m = random_model(200, 30, 24);
  const auto r = evaluate(m.params, m.data.graphs, m.data.test, m.cfg, {5, 10, 20, 50});
  std::array<std::size_t, 4> expected{};
  for (const auto& ex : m.data.test) {
    const std::size_t len = ex.sequence_length;
    expected[len >= 50 ? 3 : len >= 20 ? 2 : len >= 10 ? 1 : 0]++;
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r.buckets[k].users, expected[k]);
  EXPECT_THROW(evaluate(m.params, m.data.graphs, m.data.test, m.cfg, {10, 5}), InvalidArgument);
}

TEST(Evaluate, FilteringSeenItemsNeverLowersMetrics) {
  RandomModel m = random_model(300, 30, 25);
  const auto plain = evaluate(m.params, m.data.graphs, m.data.test, m.cfg);
  m.cfg.filter_seen = true;
  const auto filtered = evaluate(m.params, m.data.graphs, m.data.test, m.cfg);
  for (const auto& name : metric_names()) EXPECT_GE(filtered.at(name), plain.at(name)) << name;
  EXPECT_GT(filtered.at("recall@10"), plain.at("recall@10"));
}

TEST(Evaluate, DeterministicAndBatchIndependent) {
  RandomModel m = random_model(150, 30, 26);
  std::vector<ScoreTriple> sa, sb;
  const auto a = evaluate(m.params, m.data.graphs, m.data.test, m.cfg, {}, &sa);
  m.cfg.micro_batch = 7;
  const auto b = evaluate(m.params, m.data.graphs, m.data.test, m.cfg, {}, &sb);
  for (const auto& name : metric_names()) EXPECT_EQ(a.at(name), b.at(name)) << name;
  ASSERT_EQ(sa.size(), 150u);
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].user, sb[i].user);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(sa[i].scores[k], sb[i].scores[k], 1e-12);
      EXPECT_GT(sa[i].scores[k], 0.0);
      EXPECT_LT(sa[i].scores[k], 1.0);
    }
  }
}

TEST(Serialization, TextAndCsvLayout) {
  EvalReport r;
  r.users = 4;
  MetricAccumulator acc;
  for (std::size_t rank : {1u, 3u, 11u, 6u}) acc.add_rank(rank);
  r.metrics = acc.metrics();
  r.metadata["seed"] = "7";
  r.metadata["dataset"] = "toy";
  EvalReport::Bucket b;
  b.lo = 5;
  b.users = 4;
  b.metrics = r.metrics;
  r.buckets.push_back(b);

  const std::string text = to_text(r);
  EXPECT_NE(text.find("report {\n  dataset = toy\n  seed = 7\n  overall {\n    users = 4\n"), std::string::npos);
  EXPECT_NE(text.find("    recall@1 = 0.2500000000\n"), std::string::npos);
  EXPECT_NE(text.find("    recall@5 = 0.5000000000\n"), std::string::npos);
  EXPECT_NE(text.find("  bucket 5+ {\n"), std::string::npos);

  const std::string csv = to_csv(r);
  const auto nl = csv.find('\n');
  const std::string head = csv.substr(0, nl), row = csv.substr(nl + 1);
  EXPECT_EQ(head.rfind("dataset,seed,users,recall@1,recall@5,recall@10,ndcg@5,ndcg@10,5+.users,", 0), 0u);
  EXPECT_EQ(row.rfind("toy,7,4,0.2500000000,0.5000000000,0.7500000000,", 0), 0u);
  EXPECT_EQ(std::count(head.begin(), head.end(), ','), std::count(row.begin(), row.end(), ','));
}

}  // namespace
}  // namespace mabsrec
