#pragma once

// Labeled text datasets, JSONL ingestion, and client partitioning.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dicl/error.hpp"
#include "dicl/seeding.hpp"

namespace dicl {

using ExampleId = std::uint64_t;

struct Example {
  ExampleId id = 0;
  std::string text;
  int label = 0;

  bool operator==(const Example&) const = default;
};

class LabelSpace {
 public:
  LabelSpace() = default;

  explicit LabelSpace(std::vector<std::string> verbalizers)
      : verbalizers_(std::move(verbalizers)) {
    if (verbalizers_.empty()) throw ValidationError("label space must have at least one class");
    std::unordered_set<std::string> seen;
    for (const auto& v : verbalizers_) {
      if (v.empty()) throw ValidationError("verbalizers must be non-empty");
      if (!seen.insert(v).second) throw ValidationError("duplicate verbalizer '" + v + "'");
    }
  }

  // Placeholder verbalizers "class_0", "class_1", ... for unnamed label spaces.
  static LabelSpace numbered(std::size_t count) {
    std::vector<std::string> names;
    names.reserve(count);
    for (std::size_t i = 0; i < count; ++i) names.push_back("class_" + std::to_string(i));
    return LabelSpace(std::move(names));
  }

  std::size_t count() const noexcept { return verbalizers_.size(); }
  const std::string& verbalizer(int label) const { return verbalizers_.at(static_cast<std::size_t>(label)); }
  const std::vector<std::string>& verbalizers() const noexcept { return verbalizers_; }
  bool contains(int label) const noexcept {
    return label >= 0 && static_cast<std::size_t>(label) < verbalizers_.size();
  }

  bool operator==(const LabelSpace&) const = default;

 private:
  std::vector<std::string> verbalizers_;
};

// Immutable ordered collection of examples with strictly increasing ids.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<Example> examples, LabelSpace labels)
      : examples_(std::move(examples)), labels_(std::move(labels)) {
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      const auto& ex = examples_[i];
      if (i > 0 && ex.id <= examples_[i - 1].id)
        throw ValidationError("dataset ids must be strictly increasing (id " +
                              std::to_string(ex.id) + ")");
      if (!labels_.contains(ex.label))
        throw ValidationError("example " + std::to_string(ex.id) + " has label " +
                              std::to_string(ex.label) + " outside label space of size " +
                              std::to_string(labels_.count()));
      if (ex.text.empty())
        throw ValidationError("example " + std::to_string(ex.id) + " has empty text");
    }
  }

  const std::vector<Example>& examples() const noexcept { return examples_; }
  const LabelSpace& labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  auto begin() const noexcept { return examples_.begin(); }
  auto end() const noexcept { return examples_.end(); }

  std::vector<ExampleId> ids() const {
    std::vector<ExampleId> out;
    out.reserve(examples_.size());
    for (const auto& ex : examples_) out.push_back(ex.id);
    return out;
  }

  // Binary search; ids are sorted.
  const Example* find(ExampleId id) const noexcept {
    auto it = std::lower_bound(examples_.begin(), examples_.end(), id,
                               [](const Example& ex, ExampleId v) { return ex.id < v; });
    return it != examples_.end() && it->id == id ? &*it : nullptr;
  }

  // Examples whose positions are flagged in `keep` (same length as the dataset).
  Dataset select(const std::vector<bool>& keep) const {
    std::vector<Example> out;
    for (std::size_t i = 0; i < examples_.size(); ++i)
      if (keep[i]) out.push_back(examples_[i]);
    return Dataset(std::move(out), labels_);
  }

  Dataset select_ids(const std::vector<ExampleId>& ids) const {
    std::vector<Example> out;
    out.reserve(ids.size());
    for (ExampleId id : ids) {
      const Example* ex = find(id);
      if (!ex) throw ValidationError("id " + std::to_string(id) + " not in dataset");
      out.push_back(*ex);
    }
    std::sort(out.begin(), out.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
    return Dataset(std::move(out), labels_);
  }

  bool operator==(const Dataset&) const = default;

 private:
  std::vector<Example> examples_;
  LabelSpace labels_;
};

struct PartitionSpec {
  std::size_t num_clients = 1;
  std::size_t labels_per_client = 1;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// JSONL ingestion
//
// One {"text": ..., "label": ...} object per line. An optional first line
// {"label_space": [...]} fixes the verbalizers; otherwise the label count is
// inferred as max(label) + 1 with placeholder verbalizers. Ids follow line
// order starting at `id_offset`.
// ---------------------------------------------------------------------------

inline Dataset load_dataset(const std::filesystem::path& path, ExampleId id_offset = 0) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset file " + path.string());

  std::vector<Example> examples;
  std::optional<LabelSpace> declared;
  std::string line;
  std::size_t lineno = 0;
  bool first_record = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!rec.is_object()) throw ParseError("record is not an object", lineno);
    if (first_record && rec.contains("label_space")) {
      first_record = false;
      try {
        declared = LabelSpace(rec.at("label_space").get<std::vector<std::string>>());
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad label_space header: ") + e.what(), lineno);
      }
      continue;
    }
    first_record = false;
    if (!rec.contains("text") || !rec["text"].is_string())
      throw ParseError("missing string field 'text'", lineno);
    if (!rec.contains("label") || !rec["label"].is_number_integer())
      throw ParseError("missing integer field 'label'", lineno);
    Example ex;
    ex.id = id_offset + examples.size();
    ex.text = rec["text"].get<std::string>();
    ex.label = rec["label"].get<int>();
    if (ex.text.empty()) throw ParseError("empty text", lineno);
    if (ex.label < 0) throw ParseError("negative label", lineno);
    if (declared && !declared->contains(ex.label))
      throw ParseError("label " + std::to_string(ex.label) + " out of range for " +
                           std::to_string(declared->count()) + " classes",
                       lineno);
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) throw ValidationError("empty dataset: " + path.string());

  LabelSpace labels;
  if (declared) {
    labels = *declared;
  } else {
    int max_label = 0;
    for (const auto& ex : examples) max_label = std::max(max_label, ex.label);
    labels = LabelSpace::numbered(static_cast<std::size_t>(max_label) + 1);
  }
  return Dataset(std::move(examples), std::move(labels));
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset file " + path.string());
  out << nlohmann::json{{"label_space", d.labels().verbalizers()}}.dump() << '\n';
  for (const auto& ex : d) out << nlohmann::json{{"text", ex.text}, {"label", ex.label}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Dataset> build_shards(const Dataset& d, const std::vector<std::size_t>& owner,
                                         std::size_t num_clients) {
  std::vector<std::vector<Example>> parts(num_clients);
  for (std::size_t i = 0; i < d.size(); ++i) parts[owner[i]].push_back(d[i]);
  std::vector<Dataset> shards;
  shards.reserve(num_clients);
  for (auto& p : parts) shards.emplace_back(std::move(p), d.labels());
  return shards;
}

}  // namespace detail

inline constexpr int kMaxAssignmentRetries = 1000;

// Class-count based non-IID split: each client draws `labels_per_client`
// classes; the samples of a class are cut into contiguous near-equal parts,
// one per holder, with the first (size mod holders) parts one larger.
inline std::vector<Dataset> partition_noniid(const Dataset& d, const PartitionSpec& spec) {
  const std::size_t num_classes = d.labels().count();
  const std::size_t C = spec.num_clients;
  const std::size_t gamma = spec.labels_per_client;
  if (C < 1) throw ValidationError("num_clients must be >= 1");
  if (gamma < 1 || gamma > num_classes)
    throw ValidationError("labels_per_client must be in [1, " + std::to_string(num_classes) +
                          "], got " + std::to_string(gamma));

  Rng rng(spec.seed);
  std::vector<std::vector<std::size_t>> holders;
  bool covered = false;
  for (int attempt = 0; attempt < kMaxAssignmentRetries && !covered; ++attempt) {
    holders.assign(num_classes, {});
    std::vector<std::size_t> classes(num_classes);
    for (std::size_t c = 0; c < C; ++c) {
      std::iota(classes.begin(), classes.end(), 0);
      std::shuffle(classes.begin(), classes.end(), rng);
      for (std::size_t j = 0; j < gamma; ++j) holders[classes[j]].push_back(c);
    }
    covered = std::none_of(holders.begin(), holders.end(), [](const auto& h) { return h.empty(); });
  }
  if (!covered)
    throw ValidationError("could not assign every class to a client after " +
                          std::to_string(kMaxAssignmentRetries) + " attempts (C=" +
                          std::to_string(C) + ", labels_per_client=" + std::to_string(gamma) + ")");

  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) members[static_cast<std::size_t>(d[i].label)].push_back(i);

  std::vector<std::size_t> owner(d.size());
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    const auto& h = holders[cls];  // ascending client index by construction
    const std::size_t n = members[cls].size();
    const std::size_t base = n / h.size();
    const std::size_t extra = n % h.size();
    std::size_t pos = 0;
    for (std::size_t part = 0; part < h.size(); ++part) {
      const std::size_t len = base + (part < extra ? 1 : 0);
      for (std::size_t j = 0; j < len; ++j) owner[members[cls][pos++]] = h[part];
    }
  }
  return detail::build_shards(d, owner, C);
}

inline std::vector<Dataset> partition_iid(const Dataset& d, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients < 1) throw ValidationError("num_clients must be >= 1");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> owner(d.size());
  for (std::size_t r = 0; r < order.size(); ++r) owner[order[r]] = r % num_clients;
  return detail::build_shards(d, owner, num_clients);
}

struct ProxySplit {
  Dataset proxy;
  Dataset remainder;
};

// Draws `n` examples without replacement; both halves keep the source order.
inline ProxySplit sample_proxy(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= d.size())
    throw ValidationError("proxy size must be in (0, " + std::to_string(d.size()) + "), got " +
                          std::to_string(n));
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> in_proxy(d.size(), false);
  for (std::size_t i = 0; i < n; ++i) in_proxy[order[i]] = true;
  std::vector<bool> in_rest(in_proxy.size());
  std::transform(in_proxy.begin(), in_proxy.end(), in_rest.begin(), [](bool b) { return !b; });
  return {d.select(in_proxy), d.select(in_rest)};
}

// Reassigns each example's label, with probability `rate`, to a uniformly
// chosen different class. Models annotation noise on client-held data.
inline Dataset inject_label_noise(const Dataset& d, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("label noise rate must be in [0, 1]");
  const auto num_classes = static_cast<int>(d.labels().count());
  if (rate == 0.0 || num_classes < 2) return d;
  Rng rng(seed);
  std::bernoulli_distribution flip(rate);
  std::uniform_int_distribution<int> shift(1, num_classes - 1);
  std::vector<Example> out(d.begin(), d.end());
  for (auto& ex : out) {
    if (flip(rng)) ex.label = (ex.label + shift(rng)) % num_classes;
  }
  return Dataset(std::move(out), d.labels());
}

inline nlohmann::json shard_manifest(const std::vector<Dataset>& shards) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t c = 0; c < shards.size(); ++c) {
    std::set<int> labels;
    for (const auto& ex : shards[c]) labels.insert(ex.label);
    clients.push_back({{"client", c}, {"ids", shards[c].ids()}, {"labels", labels}});
  }
  return {{"schema_version", 1}, {"num_clients", shards.size()}, {"clients", clients}};
}

inline std::vector<Dataset> shards_from_manifest(const Dataset& d, const nlohmann::json& manifest) {
  std::vector<Dataset> shards;
  for (const auto& c : manifest.at("clients"))
    shards.push_back(d.select_ids(c.at("ids").get<std::vector<ExampleId>>()));
  return shards;
}

}  // namespace dicl
