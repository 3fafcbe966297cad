#pragma once

// Oracle per-client budgets and the quantized supervision set used to train
// budget allocators.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dicl/embedder.hpp"
#include "dicl/error.hpp"
#include "dicl/parallel.hpp"
#include "dicl/retrieval.hpp"

namespace dicl {

inline std::size_t quantize(std::size_t count, std::size_t delta) {
  if (delta == 0) throw ValidationError("quantization delta must be >= 1");
  return count / delta;
}

// Lower bin edge.
inline std::size_t dequantize(std::size_t cls, std::size_t delta) { return cls * delta; }

// Per client: how many of its local top-k also belong to the global top-k.
inline std::vector<std::size_t> oracle_budget(std::span<const double> query, std::size_t k,
                                              std::span<const BoundCorpus> shards,
                                              const BoundCorpus& global) {
  for (const auto& shard : shards)
    for (const auto& ex : shard.dataset())
      if (!global.dataset().find(ex.id))
        throw ValidationError("shard id " + std::to_string(ex.id) + " is not in the global corpus");

  const RankedSet global_top = global.top_k(query, k);
  std::unordered_set<ExampleId> global_ids;
  for (const auto& nb : global_top) global_ids.insert(nb.id);
  std::vector<std::size_t> counts;
  counts.reserve(shards.size());
  for (const auto& shard : shards) {
    std::size_t n = 0;
    for (const auto& nb : shard.top_k(query, k)) n += global_ids.count(nb.id);
    counts.push_back(n);
  }
  return counts;
}

struct BudgetRecord {
  ExampleId query_id = 0;
  Embedding embedding;
  std::vector<std::size_t> raw_counts;
  std::vector<std::size_t> classes;

  bool operator==(const BudgetRecord&) const = default;
};

struct BudgetDataset {
  std::size_t num_clients = 0;
  std::size_t k = 0;
  std::size_t delta = 1;
  std::vector<BudgetRecord> records;

  std::size_t num_classes() const noexcept { return k / delta + 1; }
  std::size_t dim() const noexcept { return records.empty() ? 0 : records.front().embedding.size(); }

  bool operator==(const BudgetDataset&) const = default;
};

// For each proxy query: every client returns its local top-k, the server
// reranks the union to the top-k, and each client's share of that set is
// counted and quantized by `delta`.
inline BudgetDataset construct_budget_dataset(const BoundCorpus& proxy, std::span<const BoundCorpus> shards,
                                              std::size_t k, std::size_t delta) {
  if (shards.empty()) throw ValidationError("at least one client shard is required");
  if (k == 0) throw ValidationError("ICE budget k must be >= 1");
  if (delta == 0) throw ValidationError("quantization delta must be >= 1");
  for (const auto& s : shards)
    if (s.dim() != proxy.dim())
      throw ValidationError("shard and proxy embedding dimensions differ");

  BudgetDataset out{shards.size(), k, delta, {}};
  out.records.resize(proxy.size());
  parallel_for(proxy.size(), [&](std::size_t j) {
    const auto& ex = proxy.dataset()[j];
    const auto query = proxy.store().at(ex.id);

    std::vector<RankedSet> local;
    local.reserve(shards.size());
    EmbeddingStore returned(proxy.dim());
    for (const auto& shard : shards) {
      local.push_back(shard.top_k(query, k));
      for (const auto& nb : local.back())
        if (!returned.contains(nb.id)) returned.insert(nb.id, shard.store().at(nb.id));
    }
    const RankedSet top = merge_rerank(query, k, local, returned);
    std::unordered_set<ExampleId> top_ids;
    for (const auto& nb : top) top_ids.insert(nb.id);

    BudgetRecord rec;
    rec.query_id = ex.id;
    rec.embedding.assign(query.begin(), query.end());
    for (const auto& s : local) {
      std::size_t n = 0;
      for (const auto& nb : s) n += top_ids.count(nb.id);
      rec.raw_counts.push_back(n);
      rec.classes.push_back(quantize(n, delta));
    }
    out.records[j] = std::move(rec);
  });
  return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence: header {"schema_version", "C", "k", "delta"}, then one
// {"query_id", "vector", "raw_counts", "classes"} object per record.
// ---------------------------------------------------------------------------

inline void save_budget_dataset(const BudgetDataset& b, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write budget dataset " + path.string());
  out << nlohmann::json{{"schema_version", 1}, {"C", b.num_clients}, {"k", b.k}, {"delta", b.delta}}.dump()
      << '\n';
  for (const auto& r : b.records)
    out << nlohmann::json{{"query_id", r.query_id},
                          {"vector", r.embedding},
                          {"raw_counts", r.raw_counts},
                          {"classes", r.classes}}
               .dump()
        << '\n';
}

inline BudgetDataset load_budget_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open budget dataset " + path.string());
  BudgetDataset b;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      if (!have_header) {
        b.num_clients = rec.at("C").get<std::size_t>();
        b.k = rec.at("k").get<std::size_t>();
        b.delta = rec.at("delta").get<std::size_t>();
        if (b.delta == 0) throw ParseError("delta must be >= 1", lineno);
        have_header = true;
        continue;
      }
      BudgetRecord r;
      r.query_id = rec.at("query_id").get<ExampleId>();
      r.embedding = rec.at("vector").get<Embedding>();
      r.raw_counts = rec.at("raw_counts").get<std::vector<std::size_t>>();
      r.classes = rec.at("classes").get<std::vector<std::size_t>>();
      if (r.raw_counts.size() != b.num_clients || r.classes.size() != b.num_clients)
        throw ParseError("record does not have C entries", lineno);
      for (std::size_t c = 0; c < b.num_clients; ++c)
        if (r.classes[c] != quantize(r.raw_counts[c], b.delta) || r.classes[c] >= b.num_classes())
          throw ParseError("class does not match quantized raw count", lineno);
      if (!b.records.empty() && r.embedding.size() != b.dim())
        throw ParseError("inconsistent embedding dimension", lineno);
      b.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad budget record: ") + e.what(), lineno);
    }
  }
  if (!have_header) throw ValidationError("budget dataset has no header: " + path.string());
  return b;
}

}  // namespace dicl
