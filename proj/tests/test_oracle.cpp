#include <gtest/gtest.h>

#include <random>
#include <set>

#include "dicl/oracle.hpp"
#include "test_util.hpp"

using namespace dicl;
namespace dt = dicl::testing;

namespace {

std::vector<BoundCorpus> bind_shards(const std::vector<Dataset>& shards, const EmbeddingStore& store) {
  std::vector<BoundCorpus> out;
  for (const auto& s : shards) out.push_back(BoundCorpus::from_superset(s, store));
  return out;
}

// Independent count: |full-sort local top-k ∩ full-sort global top-k|.
std::vector<std::size_t> brute_force_budget(const Embedding& q, std::size_t k, const std::vector<Dataset>& shards,
                                            const Dataset& global, const EmbeddingStore& store) {
  const auto g = dt::brute_force_ids(q, k, global, store);
  const std::set<ExampleId> gs(g.begin(), g.end());
  std::vector<std::size_t> out;
  for (const auto& s : shards) {
    std::size_t n = 0;
    for (ExampleId id : dt::brute_force_ids(q, k, s, store)) n += gs.count(id);
    out.push_back(n);
  }
  return out;
}

}  // namespace

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize(7, 3), 2u);
  for (std::size_t d = 1; d < 6; ++d) EXPECT_EQ(quantize(0, d), 0u);
  EXPECT_EQ(quantize(32, 1), 32u);
  EXPECT_THROW(quantize(3, 0), ValidationError);
  EXPECT_EQ(dequantize(2, 3), 6u);
  EXPECT_EQ(dequantize(0, 4), 0u);
}

TEST(Quantize, FloorDivisionSandwich) {
  for (std::size_t n = 0; n < 200; ++n)
    for (std::size_t d = 1; d < 12; ++d) {
      const auto c = quantize(n, d);
      EXPECT_LE(dequantize(c, d), n);
      EXPECT_LT(n, dequantize(c + 1, d));
    }
}

TEST(OracleBudget, SingleShardEqualsGlobal) {
  std::mt19937_64 rng(1);
  const auto c = dt::random_corpus(30, 4, 2, rng);
  const BoundCorpus g(c.dataset, c.store);
  const std::vector<BoundCorpus> shards{g};
  EXPECT_EQ(oracle_budget(dt::random_vector(4, rng), 6, shards, g), (std::vector<std::size_t>{6}));
}

TEST(OracleBudget, MatchesBruteForceOnThreeShards) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = dt::random_corpus(60, 5, 2, rng, trial % 2 == 0);
    const auto shards = dt::random_full_partition(c.dataset, 3, rng);
    const auto q = dt::random_vector(5, rng, trial % 2 == 0);
    const auto got = oracle_budget(q, 6, bind_shards(shards, c.store), BoundCorpus(c.dataset, c.store));
    EXPECT_EQ(got, brute_force_budget(q, 6, shards, c.dataset, c.store));
  }
}

TEST(OracleBudget, SumsToKOverFullPartitions) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 20 + rng() % 200, k = 1 + rng() % 20, parts = 2 + rng() % 5;
    const auto c = dt::random_corpus(n, 1 + rng() % 10, 2, rng, trial % 2 == 0);
    const auto shards = bind_shards(dt::random_full_partition(c.dataset, parts, rng), c.store);
    const auto b = oracle_budget(dt::random_vector(c.store.dim(), rng, trial % 2 == 0), k, shards,
                                 BoundCorpus(c.dataset, c.store));
    EXPECT_EQ(std::accumulate(b.begin(), b.end(), std::size_t{0}), k);
  }
}

TEST(OracleBudget, RejectsShardOutsideGlobal) {
  std::mt19937_64 rng(4);
  const auto c = dt::random_corpus(10, 2, 1, rng);
  const auto half = c.dataset.select_ids({0, 1, 2});
  const BoundCorpus global = BoundCorpus::from_superset(half, c.store);
  const std::vector<BoundCorpus> shards{BoundCorpus::from_superset(c.dataset.select_ids({3}), c.store)};
  EXPECT_THROW(oracle_budget(std::vector<double>{0, 0}, 2, shards, global), ValidationError);
}

TEST(BudgetDataset, ConstructionMatchesIndependentCounts) {
  std::mt19937_64 rng(5);
  const auto c = dt::random_corpus(40, 3, 2, rng, true);
  const auto proxy = dt::random_corpus(25, 3, 2, rng, true);
  // Shift proxy ids out of the client id range.
  EmbeddingStore pstore(3);
  std::vector<Example> pex;
  for (const auto& ex : proxy.dataset) {
    pex.push_back({ex.id + 1000, ex.text, ex.label});
    pstore.insert(ex.id + 1000, proxy.store.at(ex.id));
  }
  const BoundCorpus p(Dataset(pex, proxy.dataset.labels()), pstore);
  const auto shards = dt::random_full_partition(c.dataset, 3, rng);
  const auto b = construct_budget_dataset(p, bind_shards(shards, c.store), 8, 3);
  ASSERT_EQ(b.records.size(), 25u);
  EXPECT_EQ(b.num_classes(), 3u);
  for (std::size_t j = 0; j < b.records.size(); ++j) {
    const auto& r = b.records[j];
    EXPECT_EQ(r.query_id, pex[j].id);
    const Embedding q(pstore.at(r.query_id).begin(), pstore.at(r.query_id).end());
    EXPECT_EQ(r.raw_counts, brute_force_budget(q, 8, shards, c.dataset, c.store));
    EXPECT_EQ(std::accumulate(r.raw_counts.begin(), r.raw_counts.end(), std::size_t{0}), 8u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(r.classes[i], r.raw_counts[i] / 3);
      EXPECT_LE(r.classes[i], 8u / 3);
    }
  }
}

TEST(BudgetDataset, ShapesFromPresetAndCoarsestDelta) {
  std::mt19937_64 rng(6);
  const auto c = dt::random_corpus(300, 4, 2, rng);
  const auto split = sample_proxy(c.dataset, 100, 1);
  const auto shards = bind_shards(partition_iid(split.remainder, 4, 2), c.store);
  const auto proxy = BoundCorpus::from_superset(split.proxy, c.store);
  const auto b = construct_budget_dataset(proxy, shards, 32, 3);
  EXPECT_EQ(b.records.size(), 100u);
  EXPECT_EQ(b.num_classes(), 11u);
  const auto coarse = construct_budget_dataset(proxy, shards, 32, 32);
  for (const auto& r : coarse.records)
    for (auto cls : r.classes) EXPECT_LE(cls, 1u);
  EXPECT_THROW(construct_budget_dataset(proxy, shards, 0, 1), ValidationError);
  EXPECT_THROW(construct_budget_dataset(proxy, {}, 4, 1), ValidationError);
}

TEST(BudgetDataset, SaveLoadRoundTripAndValidation) {
  dt::TempDir tmp("budget");
  std::mt19937_64 rng(7);
  const auto c = dt::random_corpus(120, 3, 2, rng);
  const auto split = sample_proxy(c.dataset, 30, 3);
  const auto b = construct_budget_dataset(BoundCorpus::from_superset(split.proxy, c.store),
                                          bind_shards(partition_iid(split.remainder, 3, 1), c.store), 6, 2);
  save_budget_dataset(b, tmp / "b.jsonl");
  EXPECT_EQ(load_budget_dataset(tmp / "b.jsonl"), b);

  std::ofstream bad(tmp / "bad.jsonl");
  bad << R"({"schema_version":1,"C":2,"k":4,"delta":2})" << '\n'
      << R"({"query_id":0,"vector":[0.0],"raw_counts":[3,1],"classes":[0,0]})" << '\n';
  bad.close();
  try {
    load_budget_dataset(tmp / "bad.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
