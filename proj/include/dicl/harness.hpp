#pragma once

// Experiment orchestration: config parsing, cached pipeline stages
// (data -> partition -> budget dataset -> allocators), policy evaluation,
// reports, and budget-efficiency analysis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "dicl/allocator.hpp"
#include "dicl/corpus.hpp"
#include "dicl/embedder.hpp"
#include "dicl/error.hpp"
#include "dicl/federation.hpp"
#include "dicl/inference.hpp"
#include "dicl/oracle.hpp"
#include "dicl/parallel.hpp"
#include "dicl/retrieval.hpp"
#include "dicl/seeding.hpp"
#include "dicl/synthetic.hpp"

namespace dicl {

inline constexpr std::string_view kVersion = "dicl 0.1.0";
inline constexpr int kSchemaVersion = 1;

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string source = "synthetic";  // synthetic | jsonl
  // synthetic
  std::size_t num_classes = 4;
  std::size_t per_class = 450;
  std::size_t dim = 16;
  double spread = 0.1;
  std::size_t eval_size = 800;
  // jsonl
  std::string train_path;
  std::string eval_path;
  // Annotation noise applied to the client-held training pool only.
  double train_label_noise = 0.0;
};

struct EmbeddingConfig {
  std::string source = "synthetic";  // synthetic | hash | file
  std::size_t dim = 768;
  std::uint64_t seed = 0;
  std::string path;
};

struct PartitionConfig {
  std::string scheme = "noniid";  // noniid | iid
  std::size_t num_clients = 4;
  std::size_t labels_per_client = 1;
};

struct BackendConfig {
  std::string kind = "mock";  // mock | http
  HttpBackendConfig http;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  DataConfig data;
  EmbeddingConfig embedding;
  PartitionConfig partition;
  std::size_t k = 8;
  std::size_t delta = 2;
  std::size_t alpha = 1;
  std::size_t proxy_size = 300;
  std::size_t max_test_queries = 0;  // 0: whole test split
  std::optional<double> quant_ratio;  // recorded only; has no defined semantics
  std::vector<std::string> policies = {"uniform", "learned", "infinite"};
  TrainConfig train;
  BackendConfig backend;
  PromptTemplate prompt;
  std::size_t prompt_char_cap = 0;
  bool paraphrase_queries = false;
  std::vector<double> efficiency_multipliers = {0.5, 1.0, 1.25, 2.0};
  std::string output_dir = "runs/default";

  void validate() const;
};

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, _] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ValidationError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + "." + key + ": " + e.what());
  }
}

// Deep merge: objects merge key-wise, everything else is replaced.
inline void merge_into(json& base, const json& patch) {
  if (!base.is_object() || !patch.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [key, value] : patch.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace detail

// Dataset presets: ICE count k, client count and non-IID level, proxy size,
// quantization delta, buffer alpha, and the recorded QuantRatio value.
inline json preset(const std::string& name) {
  struct Row {
    const char* name;
    std::size_t classes, clients, gamma, k, proxy, delta, alpha;
    double quant_ratio;
  };
  static const Row rows[] = {
      {"sst5", 5, 4, 2, 32, 500, 3, 0, 0.5},  {"amazon", 5, 2, 3, 8, 750, 2, 0, 0.5},
      {"yelp", 2, 2, 3, 4, 750, 2, 2, 0.5},   {"mr", 2, 4, 1, 32, 500, 3, 0, 0.5},
      {"yahoo", 10, 2, 5, 4, 750, 2, 2, 0.5}, {"agnews", 4, 2, 2, 4, 750, 2, 2, 0.5},
      {"subj", 2, 4, 1, 32, 500, 3, 0, 0.3},
  };
  if (name == "synthetic") {
    return json{{"data", {{"source", "synthetic"}, {"num_classes", 4}, {"per_class", 450}, {"dim", 16},
                          {"spread", 0.1}, {"eval_size", 800}, {"train_label_noise", 0.25}}},
                {"embedding", {{"source", "synthetic"}}},
                {"partition", {{"scheme", "noniid"}, {"num_clients", 4}, {"labels_per_client", 1}}},
                {"k", 8},
                {"delta", 2},
                {"alpha", 1},
                {"proxy_size", 300}};
  }
  for (const auto& r : rows) {
    if (name != r.name) continue;
    return json{{"data", {{"source", "jsonl"}, {"num_classes", r.classes}}},
                {"embedding", {{"source", "file"}, {"dim", 1024}}},
                {"partition", {{"scheme", "noniid"}, {"num_clients", r.clients}, {"labels_per_client", r.gamma}}},
                {"k", r.k},
                {"delta", r.delta},
                {"alpha", r.alpha},
                {"proxy_size", r.proxy},
                {"quant_ratio", r.quant_ratio},
                {"train", {{"epochs", 800}, {"batch_size", 8}, {"width", 300}}}};
  }
  throw ValidationError("unknown preset '" + name + "'");
}

inline ExperimentConfig parse_config(json j) {
  using detail::check_keys;
  using detail::read;
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  if (j.contains("preset")) {
    json merged = preset(j.at("preset").get<std::string>());
    json patch = j;
    patch.erase("preset");
    detail::merge_into(merged, patch);
    j = std::move(merged);
  }
  check_keys(j,
             {"seeds", "data", "embedding", "partition", "k", "delta", "alpha", "proxy_size", "max_test_queries",
              "quant_ratio", "policies", "train", "backend", "prompt", "prompt_char_cap", "paraphrase_queries",
              "efficiency_multipliers", "output_dir"},
             "config");
  ExperimentConfig c;
  read(j, "seeds", c.seeds, "config");
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"source", "num_classes", "per_class", "dim", "spread", "eval_size", "train", "eval",
                   "train_label_noise"},
               "data");
    read(d, "source", c.data.source, "data");
    read(d, "num_classes", c.data.num_classes, "data");
    read(d, "per_class", c.data.per_class, "data");
    read(d, "dim", c.data.dim, "data");
    read(d, "spread", c.data.spread, "data");
    read(d, "eval_size", c.data.eval_size, "data");
    read(d, "train", c.data.train_path, "data");
    read(d, "eval", c.data.eval_path, "data");
    read(d, "train_label_noise", c.data.train_label_noise, "data");
  }
  if (j.contains("embedding")) {
    const auto& e = j["embedding"];
    check_keys(e, {"source", "dim", "seed", "path"}, "embedding");
    read(e, "source", c.embedding.source, "embedding");
    read(e, "dim", c.embedding.dim, "embedding");
    read(e, "seed", c.embedding.seed, "embedding");
    read(e, "path", c.embedding.path, "embedding");
  }
  if (j.contains("partition")) {
    const auto& p = j["partition"];
    check_keys(p, {"scheme", "num_clients", "labels_per_client"}, "partition");
    read(p, "scheme", c.partition.scheme, "partition");
    read(p, "num_clients", c.partition.num_clients, "partition");
    read(p, "labels_per_client", c.partition.labels_per_client, "partition");
  }
  read(j, "k", c.k, "config");
  read(j, "delta", c.delta, "config");
  read(j, "alpha", c.alpha, "config");
  read(j, "proxy_size", c.proxy_size, "config");
  read(j, "max_test_queries", c.max_test_queries, "config");
  if (j.contains("quant_ratio") && !j["quant_ratio"].is_null()) c.quant_ratio = j["quant_ratio"].get<double>();
  read(j, "policies", c.policies, "config");
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, {"epochs", "learning_rate", "batch_size", "validation_fraction", "width", "optimizer"}, "train");
    if (t.contains("optimizer") && t["optimizer"] != "sgd") throw ValidationError("train.optimizer must be \"sgd\"");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "validation_fraction", c.train.validation_fraction, "train");
    read(t, "width", c.train.width, "train");
  }
  if (j.contains("backend")) {
    const auto& b = j["backend"];
    check_keys(b, {"kind", "endpoint", "model", "api_key_env", "timeout_seconds", "max_retries", "backoff_ms",
                   "max_tokens", "response_pointer", "max_in_flight"},
               "backend");
    read(b, "kind", c.backend.kind, "backend");
    c.backend.http = b.get<HttpBackendConfig>();
  }
  if (j.contains("prompt")) {
    check_keys(j["prompt"], {"instruction", "example_format", "query_format", "joiner", "nearest_last"}, "prompt");
    c.prompt = j["prompt"].get<PromptTemplate>();
  }
  read(j, "prompt_char_cap", c.prompt_char_cap, "config");
  read(j, "paraphrase_queries", c.paraphrase_queries, "config");
  read(j, "efficiency_multipliers", c.efficiency_multipliers, "config");
  read(j, "output_dir", c.output_dir, "config");
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(std::move(j));
}

inline void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ValidationError("at least one seed is required");
  if (k < 1) throw ValidationError("k must be >= 1");
  if (delta < 1) throw ValidationError("delta must be >= 1");
  if (proxy_size < 1) throw ValidationError("proxy_size must be >= 1");
  if (data.source == "synthetic") {
    if (data.num_classes == 0 || data.per_class == 0 || data.dim == 0)
      throw ValidationError("synthetic data parameters must be positive");
    const std::size_t total = data.num_classes * data.per_class;
    if (data.eval_size == 0 || data.eval_size >= total)
      throw ValidationError("data.eval_size must be in (0, " + std::to_string(total) + ")");
    if (proxy_size >= data.eval_size) throw ValidationError("proxy_size must be smaller than the evaluation pool");
    if (embedding.source != "synthetic" && embedding.source != "hash")
      throw ValidationError("synthetic data supports embedding sources 'synthetic' and 'hash'");
  } else if (data.source == "jsonl") {
    if (data.train_path.empty() || data.eval_path.empty())
      throw ValidationError("jsonl data needs data.train and data.eval paths");
    if (embedding.source == "synthetic") throw ValidationError("synthetic embeddings need synthetic data");
  } else {
    throw ValidationError("data.source must be 'synthetic' or 'jsonl'");
  }
  if (embedding.source == "file" && embedding.path.empty())
    throw ValidationError("embedding.source 'file' needs embedding.path");
  if (embedding.source != "synthetic" && embedding.source != "hash" && embedding.source != "file")
    throw ValidationError("embedding.source must be synthetic, hash, or file");
  if (embedding.source == "hash" && embedding.dim < 2) throw ValidationError("hash embedding dim must be >= 2");
  if (!(data.train_label_noise >= 0.0 && data.train_label_noise <= 1.0))
    throw ValidationError("data.train_label_noise must be in [0, 1]");
  if (partition.scheme != "noniid" && partition.scheme != "iid")
    throw ValidationError("partition.scheme must be 'noniid' or 'iid'");
  if (partition.num_clients < 1) throw ValidationError("partition.num_clients must be >= 1");
  if (partition.scheme == "noniid" && partition.labels_per_client < 1)
    throw ValidationError("partition.labels_per_client must be >= 1");
  if (policies.empty()) throw ValidationError("at least one policy is required");
  for (const auto& p : policies)
    if (p != "singleton") parse_policy(p);
  if (backend.kind != "mock" && backend.kind != "http") throw ValidationError("backend.kind must be mock or http");
  if (backend.kind == "http") parse_endpoint(backend.http.endpoint);
  prompt.validate();
  train.validate();
  for (double m : efficiency_multipliers)
    if (!(m >= 0.0)) throw ValidationError("efficiency multipliers must be >= 0");
}

inline json to_json_config(const ExperimentConfig& c) {
  json data = {{"source", c.data.source}, {"train_label_noise", c.data.train_label_noise}};
  if (c.data.source == "synthetic") {
    data.update({{"num_classes", c.data.num_classes},
                 {"per_class", c.data.per_class},
                 {"dim", c.data.dim},
                 {"spread", c.data.spread},
                 {"eval_size", c.data.eval_size}});
  } else {
    data.update({{"train", c.data.train_path}, {"eval", c.data.eval_path}});
  }
  json embedding = {{"source", c.embedding.source}};
  if (c.embedding.source == "hash") embedding.update({{"dim", c.embedding.dim}, {"seed", c.embedding.seed}});
  if (c.embedding.source == "file") embedding["path"] = c.embedding.path;
  json partition = {{"scheme", c.partition.scheme}, {"num_clients", c.partition.num_clients}};
  if (c.partition.scheme == "noniid") partition["labels_per_client"] = c.partition.labels_per_client;
  json train = c.train;
  train.erase("seed");
  json backend = {{"kind", c.backend.kind}};
  if (c.backend.kind == "http") {
    json http = c.backend.http;
    backend.update(http);
  }
  return {{"seeds", c.seeds},
          {"data", data},
          {"embedding", embedding},
          {"partition", partition},
          {"k", c.k},
          {"delta", c.delta},
          {"alpha", c.alpha},
          {"proxy_size", c.proxy_size},
          {"max_test_queries", c.max_test_queries},
          {"quant_ratio", c.quant_ratio ? json(*c.quant_ratio) : json(nullptr)},
          {"policies", c.policies},
          {"train", train},
          {"backend", backend},
          {"prompt", c.prompt},
          {"prompt_char_cap", c.prompt_char_cap},
          {"paraphrase_queries", c.paraphrase_queries},
          {"efficiency_multipliers", c.efficiency_multipliers}};
}

inline std::unique_ptr<AnsweringBackend> make_backend(const BackendConfig& b) {
  if (b.kind == "http") return std::make_unique<HttpBackend>(b.http);
  return std::make_unique<MockVoteBackend>();
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Prediction {
  std::optional<int> predicted;
  int gold = 0;
};

inline double evaluate_accuracy(const std::vector<Prediction>& answers) {
  if (answers.empty()) throw ValidationError("cannot compute accuracy of zero answers");
  std::size_t correct = 0;
  for (const auto& a : answers) correct += (a.predicted && *a.predicted == a.gold) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(answers.size());
}

struct SeedSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline SeedSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("cannot summarize zero values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct StageArtifacts {
  std::uint64_t seed = 0;
  fs::path dir;
  Dataset train;              // client-held pool (after label noise)
  EmbeddingStore store;       // every id: train and evaluation pool
  std::vector<ClientNode> clients;
  BoundCorpus global;         // union of shards
  std::shared_ptr<const BoundCorpus> proxy;
  Dataset test;
  std::optional<BudgetDataset> budget;
  std::vector<AllocatorModel> allocators;
};

namespace detail {

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return nullptr;
  try {
    return json::parse(in);
  } catch (const json::exception&) {
    return nullptr;
  }
}

inline void write_json_file(const fs::path& p, const json& j, int indent = 2) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(indent) << '\n';
}

// Per-seed stage keys. A cached artifact is reused only when its key (which
// embeds every upstream key) matches.
struct StageKeys {
  json data, partition, budget, model;
};

inline StageKeys stage_keys(const ExperimentConfig& c, std::uint64_t seed) {
  const json full = to_json_config(c);
  StageKeys k;
  k.data = {{"seed", seed}, {"data", full["data"]}, {"embedding", full["embedding"]}};
  k.partition = {{"up", k.data}, {"partition", full["partition"]}, {"proxy_size", c.proxy_size}};
  k.budget = {{"up", k.partition}, {"k", c.k}, {"delta", c.delta}};
  k.model = {{"up", k.budget}, {"train", full["train"]}};
  return k;
}

struct StageLog {
  fs::path path;
  json entries = json::object();

  bool fresh(const std::string& stage, const json& key) const {
    return entries.contains(stage) && entries[stage] == key;
  }
  void mark(const std::string& stage, const json& key) {
    entries[stage] = key;
    write_json_file(path, entries);
  }
  void invalidate_from(std::initializer_list<const char*> stages) {
    for (const char* s : stages) entries.erase(s);
    write_json_file(path, entries);
  }
};

inline std::string stage_error(const std::string& stage, const std::exception& e) {
  return "stage '" + stage + "' failed: " + e.what();
}

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(stage_error(stage, e));
  } catch (const BackendError& e) {
    throw BackendError(stage_error(stage, e));
  } catch (const Error& e) {
    throw Error(stage_error(stage, e));
  }
}

}  // namespace detail

struct StageOptions {
  bool need_budget = true;
  bool need_models = true;
};

inline bool needs_allocators(const ExperimentConfig& c) {
  return std::find(c.policies.begin(), c.policies.end(), "learned") != c.policies.end();
}

// Builds (or reloads from `<output_dir>/seed_<seed>/`) every artifact up to
// the trained allocators.
inline StageArtifacts prepare_stages(const ExperimentConfig& cfg, std::uint64_t seed, const StageOptions& opts = {}) {
  StageArtifacts a;
  a.seed = seed;
  a.dir = fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
  fs::create_directories(a.dir);
  const auto keys = detail::stage_keys(cfg, seed);
  detail::StageLog log{a.dir / "stages.json", detail::read_json_file(a.dir / "stages.json")};
  if (!log.entries.is_object()) log.entries = json::object();

  // --- data + embeddings ---------------------------------------------------
  Dataset eval_pool;
  detail::run_stage("data", [&] {
    Dataset all_train;
    if (cfg.data.source == "synthetic") {
      auto synth = synth_clusters({cfg.data.num_classes, cfg.data.per_class, cfg.data.dim, cfg.data.spread,
                                   derive_seed(seed, "data")});
      auto split = sample_proxy(synth.dataset, cfg.data.eval_size, derive_seed(seed, "eval-split"));
      eval_pool = std::move(split.proxy);
      all_train = std::move(split.remainder);
      if (cfg.embedding.source == "synthetic") a.store = std::move(synth.store);
    } else {
      all_train = load_dataset(cfg.data.train_path);
      eval_pool = load_dataset(cfg.data.eval_path, all_train.size());
      if (!(all_train.labels() == eval_pool.labels())) {
        // Inferred label spaces may differ in size; widen the smaller one.
        const std::size_t n = std::max(all_train.labels().count(), eval_pool.labels().count());
        const auto widened = LabelSpace::numbered(n);
        if (all_train.labels() != LabelSpace::numbered(all_train.labels().count()) ||
            eval_pool.labels() != LabelSpace::numbered(eval_pool.labels().count()))
          throw ValidationError("train and eval files declare different label spaces");
        all_train = Dataset(all_train.examples(), widened);
        eval_pool = Dataset(eval_pool.examples(), widened);
      }
    }
    a.train = inject_label_noise(all_train, cfg.data.train_label_noise, derive_seed(seed, "label-noise"));

    if (cfg.embedding.source == "file") {
      a.store = load_embeddings(cfg.embedding.path);
    } else if (cfg.embedding.source == "hash") {
      const fs::path cache = a.dir / "embeddings.jsonl";
      if (log.fresh("data", keys.data) && fs::exists(cache)) {
        a.store = load_embeddings(cache);
      } else {
        const HashEncoder enc{cfg.embedding.dim, cfg.embedding.seed};
        a.store = encode_dataset(a.train, enc);
        a.store.merge(encode_dataset(eval_pool, enc));
        save_embeddings_jsonl(a.store, cache);
      }
    }
    for (const auto* d : {&a.train, &eval_pool})
      for (const auto& ex : *d)
        if (!a.store.contains(ex.id))
          throw ValidationError("embedding source has no vector for example " + std::to_string(ex.id));
    if (!log.fresh("data", keys.data)) {
      log.invalidate_from({"partition", "budget", "model"});
      log.mark("data", keys.data);
    }
  });

  // --- partition + proxy split ----------------------------------------------
  detail::run_stage("partition", [&] {
    const fs::path manifest_path = a.dir / "shards.json";
    std::vector<Dataset> shards;
    json manifest = log.fresh("partition", keys.partition) ? detail::read_json_file(manifest_path) : json(nullptr);
    ProxySplit split;
    if (manifest.is_object()) {
      shards = shards_from_manifest(a.train, manifest);
      split.proxy = eval_pool.select_ids(manifest.at("proxy_ids").get<std::vector<ExampleId>>());
      split.remainder = eval_pool.select_ids(manifest.at("test_ids").get<std::vector<ExampleId>>());
    } else {
      if (cfg.partition.scheme == "noniid")
        shards = partition_noniid(a.train, {cfg.partition.num_clients, cfg.partition.labels_per_client,
                                            derive_seed(seed, "partition")});
      else
        shards = partition_iid(a.train, cfg.partition.num_clients, derive_seed(seed, "partition"));
      split = sample_proxy(eval_pool, cfg.proxy_size, derive_seed(seed, "proxy"));
      manifest = shard_manifest(shards);
      manifest["proxy_ids"] = split.proxy.ids();
      manifest["test_ids"] = split.remainder.ids();
      detail::write_json_file(manifest_path, manifest);
      log.invalidate_from({"budget", "model"});
      log.mark("partition", keys.partition);
    }
    for (std::size_t c = 0; c < shards.size(); ++c)
      a.clients.push_back({c, BoundCorpus::from_superset(shards[c], a.store)});
    a.global = BoundCorpus::from_superset(a.train, a.store);
    a.proxy = std::make_shared<const BoundCorpus>(BoundCorpus::from_superset(split.proxy, a.store));
    a.test = std::move(split.remainder);
  });

  if (!opts.need_budget) return a;

  // --- budget dataset -------------------------------------------------------
  detail::run_stage("budget", [&] {
    const fs::path path = a.dir / "budget_dataset.jsonl";
    if (log.fresh("budget", keys.budget) && fs::exists(path)) {
      a.budget = load_budget_dataset(path);
    } else {
      std::vector<BoundCorpus> shards;
      for (const auto& c : a.clients) shards.push_back(c.corpus);
      a.budget = construct_budget_dataset(*a.proxy, shards, cfg.k, cfg.delta);
      save_budget_dataset(*a.budget, path);
      log.invalidate_from({"model"});
      log.mark("budget", keys.budget);
    }
  });

  if (!opts.need_models) return a;

  // --- allocators -------------------------------------------------------------
  detail::run_stage("model", [&] {
    const fs::path dir = a.dir / "models";
    const bool fresh = log.fresh("model", keys.model);
    fs::create_directories(dir);
    a.allocators.resize(a.clients.size());
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, "train");
    for (std::size_t c = 0; c < a.clients.size(); ++c) {
      const fs::path base = dir / ("client_" + std::to_string(c));
      auto meta_path = base;
      meta_path += ".json";
      if (fresh && fs::exists(meta_path)) {
        a.allocators[c] = load_model(base).first;
        continue;
      }
      auto result = train(client_examples(*a.budget, c), tc, c);
      save_model(result.model, {cfg.delta, tc, result.selected_epoch}, base);
      a.allocators[c] = std::move(result.model);
    }
    if (!fresh) log.mark("model", keys.model);
  });
  return a;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::vector<Query> make_queries(const ExperimentConfig& cfg, const StageArtifacts& a,
                                       const AnsweringBackend& backend) {
  std::size_t n = a.test.size();
  if (cfg.max_test_queries > 0) n = std::min(n, cfg.max_test_queries);
  std::vector<Query> queries(n);
  const std::size_t workers = backend.is_mock() ? 0 : std::max<std::size_t>(1, cfg.backend.http.max_in_flight);
  parallel_for(
      n,
      [&](std::size_t i) {
        const auto& ex = a.test[i];
        Query q{ex.id, ex.text, {}, ex.label};
        const auto v = a.store.at(ex.id);
        q.embedding.assign(v.begin(), v.end());
        if (cfg.paraphrase_queries) {
          q.text = paraphrase(ex.text, backend);
          if (cfg.embedding.source == "hash") q.embedding = hash_encode(q.text, cfg.embedding.dim, cfg.embedding.seed);
        }
        queries[i] = std::move(q);
      },
      workers);
  return queries;
}

inline std::vector<Transcript> evaluate_policy(const ServerNode& server, std::span<const ClientNode> clients,
                                               const std::vector<Query>& queries, std::size_t max_workers = 0) {
  server.validate(clients.size());
  std::vector<Transcript> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { out[i] = distributed_infer(server, clients, queries[i]); },
               max_workers);
  return out;
}

inline double transcript_accuracy(const std::vector<Transcript>& ts) {
  std::vector<Prediction> preds;
  preds.reserve(ts.size());
  for (const auto& t : ts) preds.push_back({t.answer_label, t.gold_label.value_or(-1)});
  return evaluate_accuracy(preds);
}

inline void save_transcripts(const std::vector<Transcript>& ts, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write transcripts " + path.string());
  for (const auto& t : ts) out << json(t).dump() << '\n';
}

inline std::vector<Transcript> load_transcripts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open transcripts " + path.string());
  std::vector<Transcript> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).get<Transcript>());
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad transcript: ") + e.what(), lineno);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Budget efficiency
// ---------------------------------------------------------------------------

struct CurvePoint {
  double multiplier = 0.0;
  double mean_recall = 0.0;
  double mean_samples = 0.0;  // communicated per query
  std::vector<double> recalls;  // per transcript, input order
};

// Scales every per-client budget the server sent (predicted budget plus
// buffer) by m, rounded up; infinity means the whole shard. Re-runs client
// retrieval and measures how much of the global top-k the union of returned
// samples covers.
inline std::vector<CurvePoint> budget_efficiency_curve(const std::vector<Transcript>& transcripts,
                                                       std::span<const ClientNode> clients, const BoundCorpus& global,
                                                       const EmbeddingStore& queries, std::size_t k,
                                                       const std::vector<double>& multipliers) {
  std::vector<CurvePoint> out;
  for (double m : multipliers) {
    if (!(m >= 0.0)) throw ValidationError("multiplier must be >= 0");
    CurvePoint p;
    p.multiplier = m;
    p.recalls.resize(transcripts.size());
    std::vector<double> samples(transcripts.size());
    parallel_for(transcripts.size(), [&](std::size_t i) {
      const auto& t = transcripts[i];
      const auto& base = t.budgets_sent;
      if (base.size() != clients.size())
        throw ValidationError("transcript for query " + std::to_string(t.query_id) + " has the wrong client count");
      const auto e_q = queries.at(t.query_id);
      const RankedSet top = global.top_k(e_q, k);
      std::unordered_set<ExampleId> target;
      for (const auto& nb : top) target.insert(nb.id);
      std::unordered_set<ExampleId> hit;
      std::size_t sent = 0;
      for (std::size_t c = 0; c < clients.size(); ++c) {
        std::size_t budget = clients[c].corpus.size();
        if (std::isfinite(m)) {
          const double scaled = std::ceil(m * static_cast<double>(base[c]) - 1e-9);
          budget = std::min(budget, static_cast<std::size_t>(std::max(0.0, scaled)));
        }
        const RankedSet r = client_retrieve(clients[c], e_q, budget);
        sent += r.size();
        for (const auto& nb : r)
          if (target.count(nb.id)) hit.insert(nb.id);
      }
      p.recalls[i] = target.empty() ? 1.0 : static_cast<double>(hit.size()) / static_cast<double>(target.size());
      samples[i] = static_cast<double>(sent);
    });
    if (!transcripts.empty()) {
      p.mean_recall = std::accumulate(p.recalls.begin(), p.recalls.end(), 0.0) / static_cast<double>(transcripts.size());
      p.mean_samples = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(transcripts.size());
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string format_curve(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "multiplier" << std::setw(14) << "mean_recall" << "mean_samples\n";
  for (const auto& p : curve) {
    os << std::left << std::setw(12) << p.multiplier << std::setw(14) << std::fixed << std::setprecision(4)
       << p.mean_recall << std::setprecision(2) << p.mean_samples << '\n';
    os.unsetf(std::ios::fixed);
    os << std::setprecision(6);
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

struct PolicyResult {
  std::vector<double> accuracy;                   // per seed
  std::vector<std::size_t> samples_communicated;  // per seed, summed over queries
  std::vector<std::size_t> decode_errors;
  std::vector<std::size_t> zero_shot_fallbacks;
  std::vector<std::vector<double>> per_client_accuracy;  // singleton only: [client][seed]
};

struct Report {
  json config;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, PolicyResult> policies;
  // [seed][client] -> predicted budget -> count (learned policy)
  std::vector<std::vector<std::map<std::size_t, std::size_t>>> budget_histograms;
  std::vector<std::vector<CurvePoint>> efficiency;  // per seed
  std::size_t queries_per_seed = 0;

  json to_json() const {
    json pol = json::object();
    for (const auto& [name, r] : policies) {
      const auto s = summarize(r.accuracy);
      json entry = {{"accuracy_mean", s.mean},
                    {"accuracy_std", s.stddev},
                    {"accuracy_per_seed", r.accuracy},
                    {"samples_communicated_per_seed", r.samples_communicated},
                    {"decode_errors_per_seed", r.decode_errors},
                    {"zero_shot_fallbacks_per_seed", r.zero_shot_fallbacks}};
      if (!r.per_client_accuracy.empty()) entry["per_client_accuracy"] = r.per_client_accuracy;
      pol[name] = entry;
    }
    json hist = json::array();
    for (std::size_t s = 0; s < budget_histograms.size(); ++s) {
      json clients = json::array();
      for (const auto& h : budget_histograms[s]) {
        json counts = json::object();
        for (const auto& [budget, count] : h) counts[std::to_string(budget)] = count;
        clients.push_back(counts);
      }
      hist.push_back({{"seed", seeds[s]}, {"clients", clients}});
    }
    json eff = json::array();
    for (std::size_t s = 0; s < efficiency.size(); ++s) {
      json pts = json::array();
      for (const auto& p : efficiency[s])
        pts.push_back({{"multiplier", p.multiplier}, {"mean_recall", p.mean_recall}, {"mean_samples", p.mean_samples}});
      eff.push_back({{"seed", seeds[s]}, {"points", pts}});
    }
    return {{"schema_version", kSchemaVersion},
            {"version", kVersion},
            {"config", config},
            {"seeds", seeds},
            {"queries_per_seed", queries_per_seed},
            {"policies", pol},
            {"budget_histograms", hist},
            {"efficiency_curve", eff}};
  }
};

inline void write_histogram_csv(const Report& r, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "seed,client,budget_value,count\n";
  for (std::size_t s = 0; s < r.budget_histograms.size(); ++s)
    for (std::size_t c = 0; c < r.budget_histograms[s].size(); ++c)
      for (const auto& [budget, count] : r.budget_histograms[s][c])
        out << r.seeds[s] << ',' << c << ',' << budget << ',' << count << '\n';
}

inline ServerNode make_server(const ExperimentConfig& cfg, const StageArtifacts& a,
                              std::shared_ptr<const AnsweringBackend> backend, BudgetPolicy policy) {
  ServerNode s;
  s.k = cfg.k;
  s.alpha = cfg.alpha;
  s.delta = cfg.delta;
  s.policy = std::move(policy);
  s.allocators = a.allocators;
  s.proxy = a.proxy;
  s.backend = std::move(backend);
  s.prompt = cfg.prompt;
  s.labels = a.train.labels();
  s.prompt_char_cap = cfg.prompt_char_cap;
  return s;
}

// Runs every configured policy for every seed, writing transcripts per seed
// and policy plus report.json and budget_histogram.csv under output_dir.
inline Report run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  std::shared_ptr<const AnsweringBackend> backend = make_backend(cfg.backend);
  const std::size_t workers = backend->is_mock() ? 0 : std::max<std::size_t>(1, cfg.backend.http.max_in_flight);

  Report report;
  report.config = to_json_config(cfg);
  report.seeds = cfg.seeds;
  const bool learned = needs_allocators(cfg);

  for (std::uint64_t seed : cfg.seeds) {
    const StageArtifacts a = prepare_stages(cfg, seed, {learned, learned});
    const auto queries = detail::run_stage("queries", [&] { return make_queries(cfg, a, *backend); });
    report.queries_per_seed = queries.size();
    if (queries.empty()) throw ValidationError("test split is empty");

    EmbeddingStore query_store(a.store.dim());
    for (const auto& q : queries) query_store.insert(q.id, q.embedding);

    auto record = [&](const std::string& name, const std::vector<Transcript>& ts) {
      auto& r = report.policies[name];
      r.accuracy.push_back(transcript_accuracy(ts));
      std::size_t sent = 0, decode = 0, fallback = 0;
      for (const auto& t : ts) {
        sent += t.total_samples_communicated;
        decode += t.decode_error ? 1 : 0;
        fallback += t.zero_shot_fallback ? 1 : 0;
      }
      r.samples_communicated.push_back(sent);
      r.decode_errors.push_back(decode);
      r.zero_shot_fallbacks.push_back(fallback);
      save_transcripts(ts, a.dir / ("transcripts_" + name + ".jsonl"));
    };

    detail::run_stage("evaluate", [&] {
      for (const auto& name : cfg.policies) {
        if (name == "singleton") {
          // Averaged over every choice of client.
          std::vector<std::vector<Transcript>> runs;
          for (std::size_t c = 0; c < a.clients.size(); ++c)
            runs.push_back(evaluate_policy(make_server(cfg, a, backend, policy::Singleton{c}), a.clients, queries,
                                           workers));
          auto& r = report.policies["singleton"];
          r.per_client_accuracy.resize(a.clients.size());
          double acc = 0.0;
          std::size_t sent = 0, decode = 0, fallback = 0;
          for (std::size_t c = 0; c < runs.size(); ++c) {
            const double ac = transcript_accuracy(runs[c]);
            r.per_client_accuracy[c].push_back(ac);
            acc += ac;
            for (const auto& t : runs[c]) {
              sent += t.total_samples_communicated;
              decode += t.decode_error ? 1 : 0;
              fallback += t.zero_shot_fallback ? 1 : 0;
            }
            save_transcripts(runs[c], a.dir / ("transcripts_singleton-" + std::to_string(c) + ".jsonl"));
          }
          r.accuracy.push_back(acc / static_cast<double>(runs.size()));
          r.samples_communicated.push_back(sent / runs.size());
          r.decode_errors.push_back(decode);
          r.zero_shot_fallbacks.push_back(fallback);
          continue;
        }
        const auto policy = parse_policy(name, derive_seed(seed, "policy-" + name));
        const auto ts = evaluate_policy(make_server(cfg, a, backend, policy), a.clients, queries, workers);
        record(name, ts);

        if (name == "learned") {
          std::vector<std::map<std::size_t, std::size_t>> hist(a.clients.size());
          for (const auto& t : ts)
            for (std::size_t c = 0; c < t.predicted_budgets.size(); ++c) ++hist[c][t.predicted_budgets[c]];
          report.budget_histograms.push_back(std::move(hist));
          report.efficiency.push_back(budget_efficiency_curve(ts, a.clients, a.global, query_store, cfg.k,
                                                              cfg.efficiency_multipliers));
        }
      }
    });
  }

  detail::write_json_file(fs::path(cfg.output_dir) / "report.json", report.to_json());
  write_histogram_csv(report, fs::path(cfg.output_dir) / "budget_histogram.csv");
  return report;
}

}  // namespace dicl
