#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dicl/allocator.hpp"
#include "dicl/corpus.hpp"
#include "dicl/embedder.hpp"
#include "dicl/retrieval.hpp"

namespace dicl::testing {

// Random labeled points with ids 0..n-1.
struct RandomCorpus {
  Dataset dataset;
  EmbeddingStore store;
};

inline RandomCorpus random_corpus(std::size_t n, std::size_t dim, std::size_t num_labels, std::mt19937_64& rng,
                                  bool integer_grid = false) {
  std::normal_distribution<double> gauss;
  std::uniform_int_distribution<int> grid(-2, 2);
  std::uniform_int_distribution<int> label(0, static_cast<int>(num_labels) - 1);
  std::vector<Example> examples;
  EmbeddingStore store(dim);
  for (std::size_t i = 0; i < n; ++i) {
    examples.push_back({i, "doc " + std::to_string(i), label(rng)});
    Embedding v(dim);
    // Integer grids force many exact distance ties.
    for (auto& x : v) x = integer_grid ? grid(rng) : gauss(rng);
    store.insert(i, v);
  }
  return {Dataset(std::move(examples), LabelSpace::numbered(num_labels)), std::move(store)};
}

inline Embedding random_vector(std::size_t dim, std::mt19937_64& rng, bool integer_grid = false) {
  std::normal_distribution<double> gauss;
  std::uniform_int_distribution<int> grid(-2, 2);
  Embedding v(dim);
  for (auto& x : v) x = integer_grid ? grid(rng) : gauss(rng);
  return v;
}

// Brute force: full sort of every (distance, id) pair.
inline std::vector<std::pair<double, ExampleId>> brute_force_top_k(const Embedding& q, std::size_t k,
                                                                  const Dataset& d, const EmbeddingStore& store) {
  std::vector<std::pair<double, ExampleId>> all;
  for (const auto& ex : d) {
    const auto v = store.at(ex.id);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += (q[i] - v[i]) * (q[i] - v[i]);
    all.emplace_back(std::sqrt(s), ex.id);
  }
  std::sort(all.begin(), all.end());
  all.resize(std::min(k, all.size()));
  return all;
}

inline std::vector<ExampleId> brute_force_ids(const Embedding& q, std::size_t k, const Dataset& d,
                                              const EmbeddingStore& store) {
  std::vector<ExampleId> ids;
  for (const auto& [dist, id] : brute_force_top_k(q, k, d, store)) ids.push_back(id);
  return ids;
}

// Random assignment of every example to one of `parts` shards (each nonempty
// when n >= parts).
inline std::vector<Dataset> random_full_partition(const Dataset& d, std::size_t parts, std::mt19937_64& rng) {
  std::vector<std::size_t> owner(d.size());
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i < parts ? i : rng() % parts;
  std::shuffle(owner.begin(), owner.end(), rng);
  std::vector<Dataset> shards;
  for (std::size_t c = 0; c < parts; ++c) {
    std::vector<bool> keep(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) keep[i] = owner[i] == c;
    shards.push_back(d.select(keep));
  }
  return shards;
}

// Central finite differences of the mean cross-entropy against the analytic
// gradients at one random parameter point. Inputs are redrawn until no hidden
// pre-activation lies within `kink_margin` of a ReLU kink. Relative error per
// parameter is |a - n| / max(|a|, |n|, floor).
inline double gradient_check(std::uint64_t seed, std::size_t dim = 8, std::size_t width = 6,
                             std::size_t classes = 3, std::size_t batch = 4, double step = 1e-4) {
  constexpr double kink_margin = 1e-3;
  constexpr double floor = 1e-7;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  AllocatorModel m = init_model(dim, width, classes, seed);
  auto params = parameters(m);
  for (auto& p : params) p = 0.7 * gauss(rng);
  set_parameters(m, params);

  Eigen::MatrixXd x(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(batch));
  for (int attempt = 0;; ++attempt) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gauss(rng);
    const Eigen::MatrixXd z1 = (m.w1 * x).colwise() + m.b1;
    const Eigen::MatrixXd z2 = (m.w2 * z1.cwiseMax(0.0)).colwise() + m.b2;
    if (z1.cwiseAbs().minCoeff() > kink_margin && z2.cwiseAbs().minCoeff() > kink_margin) break;
    if (attempt > 1000) throw std::runtime_error("could not avoid ReLU kinks");
  }
  std::vector<std::size_t> labels(batch);
  for (auto& y : labels) y = rng() % classes;

  Gradients g;
  loss_and_gradients(m, x, labels, &g);
  const auto analytic = g.flat();
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto plus = params, minus = params;
    plus[i] += step;
    minus[i] -= step;
    AllocatorModel mp = m, mm = m;
    set_parameters(mp, plus);
    set_parameters(mm, minus);
    const double numeric =
        (loss_and_gradients(mp, x, labels, nullptr) - loss_and_gradients(mm, x, labels, nullptr)) / (2 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("dicl_test_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace dicl::testing
