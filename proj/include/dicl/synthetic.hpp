#pragma once

// Gaussian-cluster corpora for self-contained experiments: one cluster per
// class, with embeddings standing in for encoder output.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "dicl/corpus.hpp"
#include "dicl/embedder.hpp"
#include "dicl/error.hpp"
#include "dicl/seeding.hpp"

namespace dicl {

struct ClusterSpec {
  std::size_t num_classes = 4;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double spread = 0.1;  // per-coordinate standard deviation around the class mean
  std::uint64_t seed = 0;
};

struct SyntheticCorpus {
  Dataset dataset;
  EmbeddingStore store;
};

// Class means are random unit vectors; example ids run class-major
// (class c occupies ids [c * per_class, (c + 1) * per_class)).
inline SyntheticCorpus synth_clusters(const ClusterSpec& spec) {
  if (spec.num_classes == 0 || spec.per_class == 0 || spec.dim == 0)
    throw ValidationError("synthetic cluster parameters must be positive");
  if (!(spec.spread >= 0.0) || !std::isfinite(spec.spread))
    throw ValidationError("synthetic cluster spread must be a finite non-negative number");

  Rng rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<Embedding> means(spec.num_classes, Embedding(spec.dim));
  for (auto& m : means) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& x : m) {
        x = gauss(rng);
        norm += x * x;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& x : m) x /= norm;
  }

  std::vector<Example> examples;
  examples.reserve(spec.num_classes * spec.per_class);
  EmbeddingStore store(spec.dim);
  Embedding point(spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t j = 0; j < spec.per_class; ++j) {
      const ExampleId id = c * spec.per_class + j;
      for (std::size_t i = 0; i < spec.dim; ++i) point[i] = means[c][i] + spec.spread * gauss(rng);
      examples.push_back({id, "synthetic example " + std::to_string(id), static_cast<int>(c)});
      store.insert(id, point);
    }
  }
  return {Dataset(std::move(examples), LabelSpace::numbered(spec.num_classes)), std::move(store)};
}

}  // namespace dicl
