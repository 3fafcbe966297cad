// dicl: command-line front end for partitioning, encoding, budget dataset
// construction, allocator training, inference, full runs and reports.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dicl/harness.hpp"

namespace {

using namespace dicl;
using json = nlohmann::json;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig resolve(const Globals& g) {
  ExperimentConfig cfg = g.config_path.empty() ? parse_config(json::object()) : load_config(g.config_path);
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out.empty()) cfg.output_dir = g.out;
  cfg.validate();
  return cfg;
}

void print_policy_table(const Report& r) {
  std::cout << std::left << std::setw(18) << "policy" << std::setw(12) << "acc_mean" << std::setw(12) << "acc_std"
            << "samples/query\n";
  for (const auto& [name, p] : r.policies) {
    const auto s = summarize(p.accuracy);
    double samples = 0.0;
    for (auto n : p.samples_communicated) samples += static_cast<double>(n);
    samples /= static_cast<double>(p.samples_communicated.size() * std::max<std::size_t>(1, r.queries_per_seed));
    std::cout << std::left << std::setw(18) << name << std::fixed << std::setprecision(4) << std::setw(12) << s.mean
              << std::setw(12) << s.stddev << std::setprecision(2) << samples << '\n';
    std::cout.unsetf(std::ios::fixed);
  }
}

std::vector<double> parse_multipliers(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "inf" || item == "infinity") {
      out.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad multiplier '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("no multipliers given");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed in-context learning with learned per-client budgets"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the config seeds with a single seed");
  app.add_option("--out", g.out, "Override the output directory");

  auto* partition = app.add_subcommand("partition", "Partition the training pool across clients");

  auto* encode = app.add_subcommand("encode", "Hash-encode a JSONL dataset into an embedding store");
  std::string enc_input, enc_output;
  std::size_t enc_dim = 768;
  std::uint64_t enc_seed = 0;
  bool enc_binary = false;
  encode->add_option("--input", enc_input, "Input dataset (JSONL)")->required();
  encode->add_option("--output", enc_output, "Output embedding store")->required();
  encode->add_option("--dim", enc_dim, "Embedding dimension");
  encode->add_option("--encoder-seed", enc_seed, "Hash encoder seed");
  encode->add_flag("--binary", enc_binary, "Write the binary store format instead of JSONL");

  auto* build = app.add_subcommand("build-budget-dataset", "Construct the quantized oracle budget dataset");
  auto* trainer = app.add_subcommand("train-allocator", "Train one budget allocator per client");

  auto* infer = app.add_subcommand("infer", "Answer test queries (or one --text query) under a policy");
  std::string infer_policy = "learned";
  std::string infer_text;
  infer->add_option("--policy", infer_policy, "Budget policy");
  infer->add_option("--text", infer_text, "Single query text (hash embeddings only)");

  auto* run = app.add_subcommand("run", "Run every configured policy for every seed");

  auto* report = app.add_subcommand("report", "Summarize a report or compute a budget efficiency curve");
  std::string rep_report, rep_transcripts, rep_curve;
  report->add_option("--report", rep_report, "report.json to summarize");
  report->add_option("--transcripts", rep_transcripts, "Transcripts (JSONL) for the efficiency curve");
  report->add_option("--curve", rep_curve, "Comma-separated budget multipliers, e.g. 0.5,1,1.25,inf");

  auto* para = app.add_subcommand("paraphrase", "Paraphrase a text with the configured backend");
  std::string para_text;
  para->add_option("--text", para_text, "Text to paraphrase")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*partition) {
      const auto cfg = resolve(g);
      for (auto seed : cfg.seeds) {
        const auto a = prepare_stages(cfg, seed, {false, false});
        std::cout << "seed " << seed << ": " << a.clients.size() << " clients, proxy " << a.proxy->size()
                  << ", test " << a.test.size() << " -> " << (a.dir / "shards.json").string() << '\n';
        for (const auto& c : a.clients) {
          std::set<int> labels;
          for (const auto& ex : c.corpus.dataset()) labels.insert(ex.label);
          std::cout << "  client " << c.id << ": " << c.corpus.size() << " examples, labels";
          for (int l : labels) std::cout << ' ' << l;
          std::cout << '\n';
        }
      }
    } else if (*encode) {
      const Dataset d = load_dataset(enc_input);
      const auto store = encode_dataset(d, HashEncoder{enc_dim, enc_seed});
      if (enc_binary)
        save_embeddings_binary(store, enc_output);
      else
        save_embeddings_jsonl(store, enc_output);
      std::cout << "encoded " << store.size() << " examples (dim " << store.dim() << ") -> " << enc_output << '\n';
    } else if (*build) {
      const auto cfg = resolve(g);
      for (auto seed : cfg.seeds) {
        const auto a = prepare_stages(cfg, seed, {true, false});
        std::cout << "seed " << seed << ": " << a.budget->records.size() << " records, "
                  << a.budget->num_classes() << " classes -> " << (a.dir / "budget_dataset.jsonl").string() << '\n';
      }
    } else if (*trainer) {
      const auto cfg = resolve(g);
      for (auto seed : cfg.seeds) {
        const auto a = prepare_stages(cfg, seed);
        std::cout << "seed " << seed << ": trained " << a.allocators.size() << " allocators -> "
                  << (a.dir / "models").string() << '\n';
      }
    } else if (*infer) {
      auto cfg = resolve(g);
      const auto policy_name_arg = infer_policy;
      if (policy_name_arg != "singleton") parse_policy(policy_name_arg);
      const bool learned = policy_name_arg == "learned";
      std::shared_ptr<const AnsweringBackend> backend = make_backend(cfg.backend);
      for (auto seed : cfg.seeds) {
        const auto a = prepare_stages(cfg, seed, {learned, learned});
        const auto server =
            make_server(cfg, a, backend, parse_policy(policy_name_arg, derive_seed(seed, "policy-" + policy_name_arg)));
        if (!infer_text.empty()) {
          if (cfg.embedding.source != "hash")
            throw ValidationError("--text needs embedding.source 'hash' to embed the query");
          Query q{0, infer_text, hash_encode(infer_text, cfg.embedding.dim, cfg.embedding.seed), std::nullopt};
          std::cout << json(distributed_infer(server, a.clients, q)).dump(2) << '\n';
          continue;
        }
        const auto queries = make_queries(cfg, a, *backend);
        const auto ts = evaluate_policy(server, a.clients, queries,
                                        backend->is_mock() ? 0 : cfg.backend.http.max_in_flight);
        const auto path = a.dir / ("transcripts_" + policy_name_arg + ".jsonl");
        save_transcripts(ts, path);
        std::cout << "seed " << seed << ": " << policy_name_arg << " accuracy " << transcript_accuracy(ts) << " over "
                  << ts.size() << " queries -> " << path.string() << '\n';
      }
    } else if (*run) {
      const auto cfg = resolve(g);
      const Report r = run_experiment(cfg);
      print_policy_table(r);
      std::cout << "report -> " << (fs::path(cfg.output_dir) / "report.json").string() << '\n';
    } else if (*report) {
      if (!rep_report.empty()) {
        const json j = detail::read_json_file(rep_report);
        if (!j.is_object()) throw ValidationError("cannot read report " + rep_report);
        std::cout << std::left << std::setw(18) << "policy" << std::setw(12) << "acc_mean" << "acc_std\n";
        for (const auto& [name, p] : j.at("policies").items())
          std::cout << std::left << std::setw(18) << name << std::setw(12) << p.at("accuracy_mean").get<double>()
                    << p.at("accuracy_std").get<double>() << '\n';
      }
      if (!rep_transcripts.empty()) {
        const auto cfg = resolve(g);
        const auto multipliers = rep_curve.empty() ? cfg.efficiency_multipliers : parse_multipliers(rep_curve);
        const auto ts = load_transcripts(rep_transcripts);
        const auto a = prepare_stages(cfg, cfg.seeds.front(), {false, false});
        std::cout << format_curve(budget_efficiency_curve(ts, a.clients, a.global, a.store, cfg.k, multipliers));
      }
      if (rep_report.empty() && rep_transcripts.empty())
        throw ValidationError("report needs --report and/or --transcripts");
    } else if (*para) {
      const auto backend = g.config_path.empty() ? make_mock_backend() : make_backend(resolve(g).backend);
      std::cout << paraphrase(para_text, *backend) << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
