#pragma once

// Exact k-nearest-neighbour selection under L2 distance.
//
// Every ranking is ordered by the composite key (distance, id), so ties
// between duplicated vectors resolve to ascending id and results do not depend
// on input order.

#include <algorithm>
#include <cmath>
#include <span>
#include <unordered_set>
#include <vector>

#include "dicl/corpus.hpp"
#include "dicl/embedder.hpp"
#include "dicl/error.hpp"

namespace dicl {

struct Neighbor {
  ExampleId id = 0;
  double distance = 0.0;

  bool operator==(const Neighbor&) const = default;
};

inline bool ranks_before(const Neighbor& a, const Neighbor& b) noexcept {
  return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
}

// Ascending by (distance, id).
struct RankedSet {
  std::vector<Neighbor> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
  auto begin() const noexcept { return entries.begin(); }
  auto end() const noexcept { return entries.end(); }

  std::vector<ExampleId> ids() const {
    std::vector<ExampleId> out;
    out.reserve(entries.size());
    for (const auto& n : entries) out.push_back(n.id);
    return out;
  }

  bool contains(ExampleId id) const noexcept {
    return std::any_of(entries.begin(), entries.end(), [id](const Neighbor& n) { return n.id == id; });
  }

  bool operator==(const RankedSet&) const = default;
};

inline double distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValidationError("distance: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

namespace detail {

// Keeps the k best of `all` under ranks_before and sorts them.
inline RankedSet select_best(std::vector<Neighbor> all, std::size_t k) {
  if (k < all.size()) {
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), ranks_before);
    all.resize(k);
  }
  std::sort(all.begin(), all.end(), ranks_before);
  return RankedSet{std::move(all)};
}

}  // namespace detail

// Top-k over an explicit candidate id list; every id must be in `store`.
template <typename IdRange>
RankedSet top_k_among(std::span<const double> query, std::size_t k, const IdRange& ids,
                      const EmbeddingStore& store) {
  if (query.size() != store.dim())
    throw ValidationError("query dimension " + std::to_string(query.size()) +
                          " does not match store dimension " + std::to_string(store.dim()));
  std::vector<Neighbor> all;
  for (ExampleId id : ids) all.push_back({id, distance(query, store.at(id))});
  return detail::select_best(std::move(all), k);
}

// The k entries of `d` nearest to `query`; all of `d` when k >= |d|.
inline RankedSet top_k(std::span<const double> query, std::size_t k, const Dataset& d,
                       const EmbeddingStore& store) {
  store.require_bound(d);
  if (k == 0) return {};
  std::vector<Neighbor> all;
  all.reserve(d.size());
  if (query.size() != store.dim())
    throw ValidationError("query dimension " + std::to_string(query.size()) +
                          " does not match store dimension " + std::to_string(store.dim()));
  for (const auto& ex : d) all.push_back({ex.id, distance(query, store.at(ex.id))});
  return detail::select_best(std::move(all), k);
}

// Server-side reorder: union of candidate ids (deduplicated), distances
// recomputed against `store`, top-k of the union.
inline RankedSet merge_rerank(std::span<const double> query, std::size_t k,
                              const std::vector<std::vector<ExampleId>>& candidates,
                              const EmbeddingStore& store) {
  std::unordered_set<ExampleId> seen;
  std::vector<ExampleId> unique;
  for (const auto& set : candidates)
    for (ExampleId id : set)
      if (seen.insert(id).second) unique.push_back(id);
  return top_k_among(query, k, unique, store);
}

inline RankedSet merge_rerank(std::span<const double> query, std::size_t k,
                              const std::vector<RankedSet>& candidates, const EmbeddingStore& store) {
  std::vector<std::vector<ExampleId>> ids;
  ids.reserve(candidates.size());
  for (const auto& c : candidates) ids.push_back(c.ids());
  return merge_rerank(query, k, ids, store);
}

// A dataset together with a store holding exactly its ids. Validated once at
// construction so repeated searches skip the binding check.
class BoundCorpus {
 public:
  BoundCorpus() = default;

  BoundCorpus(Dataset data, EmbeddingStore store) : data_(std::move(data)), store_(std::move(store)) {
    store_.require_bound(data_);
  }

  // Binds `data` against a store that may hold additional ids.
  static BoundCorpus from_superset(Dataset data, const EmbeddingStore& store) {
    auto sub = store.subset(data);
    return BoundCorpus(std::move(data), std::move(sub));
  }

  const Dataset& dataset() const noexcept { return data_; }
  const EmbeddingStore& store() const noexcept { return store_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim() const noexcept { return store_.dim(); }

  RankedSet top_k(std::span<const double> query, std::size_t k) const {
    if (k == 0) return {};
    if (query.size() != store_.dim())
      throw ValidationError("query dimension " + std::to_string(query.size()) +
                            " does not match store dimension " + std::to_string(store_.dim()));
    std::vector<Neighbor> all;
    all.reserve(store_.size());
    for (std::size_t i = 0; i < store_.size(); ++i) all.push_back({store_.ids()[i], distance(query, store_.row(i))});
    return detail::select_best(std::move(all), k);
  }

 private:
  Dataset data_;
  EmbeddingStore store_;
};

}  // namespace dicl
