#pragma once

// Simulated client/server protocol for budgeted distributed in-context
// example retrieval. The "network" is in-process: every message the server
// sends (per-client budgets) and receives (ranked examples) is recorded in a
// Transcript, so a round can be audited and replayed.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "json.hpp"

#include "dicl/allocator.hpp"
#include "dicl/corpus.hpp"
#include "dicl/error.hpp"
#include "dicl/inference.hpp"
#include "dicl/retrieval.hpp"
#include "dicl/seeding.hpp"

namespace dicl {

struct ClientNode {
  std::size_t id = 0;
  BoundCorpus corpus;
};

namespace policy {
struct Learned {};
struct Uniform {};
struct Random {
  std::uint64_t seed = 0;
};
struct Singleton {
  std::size_t client = 0;
};
struct SocialLearning {
  std::uint64_t seed = 0;
};
struct Infinite {};
struct ProxyOnly {};
struct ZeroShot {};
}  // namespace policy

using BudgetPolicy = std::variant<policy::Learned, policy::Uniform, policy::Random, policy::Singleton,
                                  policy::SocialLearning, policy::Infinite, policy::ProxyOnly, policy::ZeroShot>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

inline std::string policy_name(const BudgetPolicy& p) {
  return std::visit(overloaded{
                        [](const policy::Learned&) -> std::string { return "learned"; },
                        [](const policy::Uniform&) -> std::string { return "uniform"; },
                        [](const policy::Random&) -> std::string { return "random"; },
                        [](const policy::Singleton& s) -> std::string { return "singleton-" + std::to_string(s.client); },
                        [](const policy::SocialLearning&) -> std::string { return "social-learning"; },
                        [](const policy::Infinite&) -> std::string { return "infinite"; },
                        [](const policy::ProxyOnly&) -> std::string { return "proxy-only"; },
                        [](const policy::ZeroShot&) -> std::string { return "zero-shot"; },
                    },
                    p);
}

// Accepts the names produced by policy_name. `seed` feeds the randomized
// policies.
inline BudgetPolicy parse_policy(const std::string& name, std::uint64_t seed = 0) {
  if (name == "learned") return policy::Learned{};
  if (name == "uniform") return policy::Uniform{};
  if (name == "random") return policy::Random{seed};
  if (name == "social-learning") return policy::SocialLearning{seed};
  if (name == "infinite") return policy::Infinite{};
  if (name == "proxy-only") return policy::ProxyOnly{};
  if (name == "zero-shot") return policy::ZeroShot{};
  if (name.rfind("singleton-", 0) == 0) {
    const std::string idx = name.substr(10);
    if (!idx.empty() && idx.find_first_not_of("0123456789") == std::string::npos)
      return policy::Singleton{std::stoul(idx)};
  }
  throw ValidationError("unknown budget policy '" + name + "'");
}

struct ServerNode {
  std::size_t k = 1;
  std::size_t alpha = 0;
  std::size_t delta = 1;
  BudgetPolicy policy = policy::Uniform{};
  std::vector<AllocatorModel> allocators;
  std::shared_ptr<const BoundCorpus> proxy;
  std::shared_ptr<const AnsweringBackend> backend;
  PromptTemplate prompt;
  LabelSpace labels;
  std::size_t prompt_char_cap = 0;  // 0: unlimited

  void validate(std::size_t num_clients) const {
    if (k == 0) throw ValidationError("server ICE budget k must be >= 1");
    if (delta == 0) throw ValidationError("delta must be >= 1");
    if (std::holds_alternative<policy::Learned>(policy) && allocators.size() != num_clients)
      throw ValidationError("learned policy needs one allocator per client (have " +
                            std::to_string(allocators.size()) + ", need " + std::to_string(num_clients) + ")");
    if (std::holds_alternative<policy::ProxyOnly>(policy) && !proxy)
      throw ValidationError("proxy-only policy needs a server proxy set");
    if (const auto* s = std::get_if<policy::Singleton>(&policy); s && s->client >= num_clients)
      throw ValidationError("singleton client index out of range");
    if (!backend) throw ValidationError("server has no answering backend");
  }
};

struct Query {
  ExampleId id = 0;
  std::string text;
  Embedding embedding;
  std::optional<int> gold;
};

struct Transcript {
  ExampleId query_id = 0;
  std::string policy;
  std::vector<std::size_t> budgets_sent;
  std::vector<std::size_t> predicted_budgets;  // learned policy only, before the buffer
  std::vector<std::vector<ExampleId>> samples_returned;
  std::vector<ExampleId> aggregated_ids;
  std::vector<ExampleId> final_ice_ids;  // prompt order
  std::vector<double> final_ice_distances;
  std::string prompt_text;
  std::size_t prompt_chars = 0;
  std::optional<int> answer_label;
  std::optional<int> gold_label;
  std::string raw_completion;
  bool decode_error = false;
  bool zero_shot_fallback = false;
  std::size_t total_samples_communicated = 0;

  bool operator==(const Transcript&) const = default;
};

inline void to_json(nlohmann::json& j, const Transcript& t) {
  j = {{"schema_version", 1},
       {"query_id", t.query_id},
       {"policy", t.policy},
       {"budgets_sent", t.budgets_sent},
       {"predicted_budgets", t.predicted_budgets},
       {"samples_returned", t.samples_returned},
       {"aggregated_ids", t.aggregated_ids},
       {"final_ice_ids", t.final_ice_ids},
       {"final_ice_distances", t.final_ice_distances},
       {"prompt_text", t.prompt_text},
       {"prompt_chars", t.prompt_chars},
       {"answer_label", t.answer_label ? nlohmann::json(*t.answer_label) : nlohmann::json(nullptr)},
       {"gold_label", t.gold_label ? nlohmann::json(*t.gold_label) : nlohmann::json(nullptr)},
       {"raw_completion", t.raw_completion},
       {"decode_error", t.decode_error},
       {"zero_shot_fallback", t.zero_shot_fallback},
       {"total_samples_communicated", t.total_samples_communicated}};
}

inline void from_json(const nlohmann::json& j, Transcript& t) {
  t.query_id = j.at("query_id").get<ExampleId>();
  t.policy = j.at("policy").get<std::string>();
  t.budgets_sent = j.at("budgets_sent").get<std::vector<std::size_t>>();
  t.predicted_budgets = j.value("predicted_budgets", std::vector<std::size_t>{});
  t.samples_returned = j.at("samples_returned").get<std::vector<std::vector<ExampleId>>>();
  t.aggregated_ids = j.at("aggregated_ids").get<std::vector<ExampleId>>();
  t.final_ice_ids = j.at("final_ice_ids").get<std::vector<ExampleId>>();
  t.final_ice_distances = j.value("final_ice_distances", std::vector<double>{});
  t.prompt_text = j.value("prompt_text", std::string{});
  t.prompt_chars = j.value("prompt_chars", std::size_t{0});
  t.answer_label = j.at("answer_label").is_null() ? std::nullopt : std::optional<int>(j.at("answer_label").get<int>());
  t.gold_label = j.at("gold_label").is_null() ? std::nullopt : std::optional<int>(j.at("gold_label").get<int>());
  t.raw_completion = j.value("raw_completion", std::string{});
  t.decode_error = j.value("decode_error", false);
  t.zero_shot_fallback = j.value("zero_shot_fallback", false);
  t.total_samples_communicated = j.at("total_samples_communicated").get<std::size_t>();
}

// Backend failure during a round; carries everything recorded before it.
class InferenceError : public BackendError {
 public:
  InferenceError(const std::string& what, Transcript partial)
      : BackendError(what), partial_(std::move(partial)) {}
  const Transcript& partial() const noexcept { return partial_; }

 private:
  Transcript partial_;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Uniformly random composition of `total` into `parts` non-negative integers
// (stars and bars: choose parts-1 bar slots among total+parts-1).
inline std::vector<std::size_t> random_composition(std::size_t total, std::size_t parts, Rng& rng) {
  if (parts == 0) throw ValidationError("cannot split a budget across zero clients");
  const std::size_t slots = total + parts - 1;
  std::vector<std::size_t> pos(slots);
  std::iota(pos.begin(), pos.end(), 0);
  for (std::size_t i = 0; i + 1 < parts; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, slots - 1);
    std::swap(pos[i], pos[pick(rng)]);
  }
  std::vector<std::size_t> bars(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(parts - 1));
  std::sort(bars.begin(), bars.end());
  std::vector<std::size_t> out;
  out.reserve(parts);
  std::size_t prev = 0;
  for (std::size_t b : bars) {
    out.push_back(b - prev);
    prev = b + 1;
  }
  out.push_back(slots - prev);
  return out;
}

// Per-client budgets the server sends for one query.
inline std::vector<std::size_t> allocate(const ServerNode& server, std::span<const double> e_q,
                                         std::span<const ClientNode> clients, ExampleId query_id = 0) {
  const std::size_t C = clients.size();
  if (C == 0) throw ValidationError("no clients");
  const std::size_t k = server.k;
  return std::visit(
      overloaded{
          [&](const policy::Uniform&) { return std::vector<std::size_t>(C, ceil_div(k, C)); },
          [&](const policy::Random& p) {
            Rng rng(derive_seed(p.seed, "random-budget", query_id));
            return random_composition(k, C, rng);
          },
          [&](const policy::Learned&) {
            if (server.allocators.size() != C)
              throw ValidationError("learned policy needs one allocator per client");
            std::vector<std::size_t> out;
            out.reserve(C);
            for (const auto& m : server.allocators) out.push_back(predict_budget(m, e_q, server.delta) + server.alpha);
            return out;
          },
          [&](const policy::Singleton& p) {
            if (p.client >= C) throw ValidationError("singleton client index out of range");
            std::vector<std::size_t> out(C, 0);
            out[p.client] = k;
            return out;
          },
          [&](const policy::SocialLearning&) { return std::vector<std::size_t>(C, ceil_div(k, C)); },
          [&](const policy::Infinite&) {
            std::vector<std::size_t> out;
            out.reserve(C);
            for (const auto& c : clients) out.push_back(c.corpus.size());
            return out;
          },
          [&](const policy::ProxyOnly&) { return std::vector<std::size_t>(C, 0); },
          [&](const policy::ZeroShot&) { return std::vector<std::size_t>(C, 0); },
      },
      server.policy);
}

// Local top-min(budget, |shard|).
inline RankedSet client_retrieve(const ClientNode& client, std::span<const double> e_q, std::size_t budget) {
  return client.corpus.top_k(e_q, budget);
}

// Retrieval phase of one round, given budgets.
struct RetrievalOutcome {
  std::vector<std::vector<ExampleId>> samples_returned;
  std::vector<ExampleId> aggregated_ids;  // union, ranked by (distance, id)
  RankedSet selected;                     // ascending by (distance, id)
  std::size_t communicated = 0;
};

namespace detail {

// Gathers client responses; the server keeps the returned vectors so it can
// rerank without access to client stores.
inline std::pair<std::vector<RankedSet>, EmbeddingStore> gather(std::span<const ClientNode> clients,
                                                                std::span<const double> e_q,
                                                                const std::vector<std::size_t>& budgets) {
  std::vector<RankedSet> responses(clients.size());
  EmbeddingStore received(clients.empty() ? e_q.size() : clients.front().corpus.dim());
  for (std::size_t c = 0; c < clients.size(); ++c) {
    if (budgets[c] == 0) continue;
    responses[c] = client_retrieve(clients[c], e_q, budgets[c]);
    for (const auto& nb : responses[c])
      if (!received.contains(nb.id)) received.insert(nb.id, clients[c].corpus.store().at(nb.id));
  }
  return {std::move(responses), std::move(received)};
}

inline const Example& lookup_example(std::span<const ClientNode> clients, ExampleId id) {
  for (const auto& c : clients)
    if (const Example* ex = c.corpus.dataset().find(id)) return *ex;
  throw ValidationError("example " + std::to_string(id) + " not held by any client");
}

}  // namespace detail

inline RetrievalOutcome retrieve_with_budgets(std::span<const ClientNode> clients, std::span<const double> e_q,
                                              const std::vector<std::size_t>& budgets, std::size_t k) {
  if (budgets.size() != clients.size()) throw ValidationError("one budget per client required");
  auto [responses, received] = detail::gather(clients, e_q, budgets);
  RetrievalOutcome out;
  for (const auto& r : responses) {
    out.samples_returned.push_back(r.ids());
    out.communicated += r.size();
  }
  const RankedSet all = merge_rerank(e_q, received.size(), responses, received);
  out.aggregated_ids = all.ids();
  out.selected.entries.assign(all.entries.begin(),
                              all.entries.begin() + static_cast<std::ptrdiff_t>(std::min(k, all.size())));
  return out;
}

namespace detail {

inline void finish_round(const ServerNode& server, const Query& query, const RankedSet& selected,
                         std::span<const ClientNode> clients, const BoundCorpus* source, Transcript& t) {
  std::vector<Neighbor> ordered(selected.begin(), selected.end());
  if (server.prompt.nearest_last) std::reverse(ordered.begin(), ordered.end());

  std::vector<PromptExample> prompt_examples;
  std::vector<VotingExample> votes;
  for (const auto& nb : ordered) {
    const Example* ex = source ? source->dataset().find(nb.id) : &lookup_example(clients, nb.id);
    if (!ex) throw ValidationError("selected example " + std::to_string(nb.id) + " not found");
    prompt_examples.push_back({ex->text, ex->label});
    votes.push_back({ex->label, nb.distance});
    t.final_ice_ids.push_back(nb.id);
    t.final_ice_distances.push_back(nb.distance);
  }
  t.prompt_text = build_prompt(prompt_examples, query.text, server.prompt, server.labels);
  t.prompt_chars = t.prompt_text.size();
  if (server.prompt_char_cap > 0 && t.prompt_chars > server.prompt_char_cap)
    throw ValidationError("prompt for query " + std::to_string(query.id) + " has " + std::to_string(t.prompt_chars) +
                          " characters, over the cap of " + std::to_string(server.prompt_char_cap));

  Answer answer;
  try {
    answer = server.backend->answer({t.prompt_text, std::move(votes), &server.labels});
  } catch (const BackendError& e) {
    throw InferenceError(e.what(), t);
  }
  t.answer_label = answer.label;
  t.raw_completion = std::move(answer.raw_completion);
  t.decode_error = !answer.label.has_value();
}

}  // namespace detail

inline Transcript social_learning_infer(const ServerNode& server, std::span<const ClientNode> clients,
                                        const Query& query, std::uint64_t seed);

// One budgeted round: allocate, gather S_c from clients with positive budget,
// rerank the union to the top-k, prompt, answer. Social learning dispatches
// to social_learning_infer.
inline Transcript distributed_infer(const ServerNode& server, std::span<const ClientNode> clients, const Query& query) {
  server.validate(clients.size());
  if (const auto* p = std::get_if<policy::SocialLearning>(&server.policy))
    return social_learning_infer(server, clients, query, p->seed);
  for (const auto& c : clients)
    if (c.corpus.dim() != query.embedding.size())
      throw ValidationError("query embedding dimension does not match client " + std::to_string(c.id));

  Transcript t;
  t.query_id = query.id;
  t.policy = policy_name(server.policy);
  t.gold_label = query.gold;
  t.budgets_sent = allocate(server, query.embedding, clients, query.id);
  if (std::holds_alternative<policy::Learned>(server.policy))
    for (std::size_t b : t.budgets_sent) t.predicted_budgets.push_back(b - server.alpha);

  RankedSet selected;
  const BoundCorpus* source = nullptr;
  if (std::holds_alternative<policy::ProxyOnly>(server.policy)) {
    selected = server.proxy->top_k(query.embedding, server.k);
    source = server.proxy.get();
    t.samples_returned.assign(clients.size(), {});
    t.aggregated_ids = selected.ids();
  } else if (std::holds_alternative<policy::ZeroShot>(server.policy)) {
    t.samples_returned.assign(clients.size(), {});
  } else {
    auto outcome = retrieve_with_budgets(clients, query.embedding, t.budgets_sent, server.k);
    t.samples_returned = std::move(outcome.samples_returned);
    t.aggregated_ids = std::move(outcome.aggregated_ids);
    t.total_samples_communicated = outcome.communicated;
    selected = std::move(outcome.selected);
    t.zero_shot_fallback = selected.empty();
  }
  detail::finish_round(server, query, selected, clients, source, t);
  return t;
}

// Each client sends its top-ceil(k/C); the server keeps a uniformly random
// subset of min(k, |union|) of the union, seeded per query.
inline Transcript social_learning_infer(const ServerNode& server, std::span<const ClientNode> clients,
                                        const Query& query, std::uint64_t seed) {
  if (clients.empty()) throw ValidationError("no clients");
  if (!server.backend) throw ValidationError("server has no answering backend");
  Transcript t;
  t.query_id = query.id;
  t.policy = "social-learning";
  t.gold_label = query.gold;
  t.budgets_sent.assign(clients.size(), ceil_div(server.k, clients.size()));

  auto outcome = retrieve_with_budgets(clients, query.embedding, t.budgets_sent, clients.size() * t.budgets_sent[0]);
  t.samples_returned = std::move(outcome.samples_returned);
  t.aggregated_ids = outcome.aggregated_ids;
  t.total_samples_communicated = outcome.communicated;

  std::vector<Neighbor> pool = std::move(outcome.selected.entries);
  Rng rng(derive_seed(seed, "social-learning", query.id));
  const std::size_t take = std::min(server.k, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(take);
  std::sort(pool.begin(), pool.end(), ranks_before);
  RankedSet selected{std::move(pool)};
  t.zero_shot_fallback = selected.empty();
  detail::finish_round(server, query, selected, clients, nullptr, t);
  return t;
}

}  // namespace dicl
