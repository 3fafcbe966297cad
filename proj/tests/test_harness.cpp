#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dicl/harness.hpp"
#include "test_util.hpp"

using namespace dicl;
namespace dt = dicl::testing;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small synthetic setup that trains in well under a second.
json small_config(const fs::path& out) {
  return {{"preset", "synthetic"},
          {"seeds", {0, 1}},
          {"data", {{"per_class", 60}, {"eval_size", 120}}},
          {"proxy_size", 60},
          {"policies", {"uniform", "learned", "infinite"}},
          {"train", {{"epochs", 5}, {"width", 16}, {"learning_rate", 0.01}}},
          {"output_dir", out.string()}};
}

struct CliResult {
  int status;
  std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "cli_output.txt";
  const std::string cmd = std::string(DICL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(log)};
}

}  // namespace

TEST(Config, DefaultsValidateAndEchoRoundTrips) {
  const auto c = parse_config(json::object());
  EXPECT_EQ(c.seeds.size(), 3u);
  EXPECT_EQ(c.train.epochs, 800u);
  const auto echo = to_json_config(c);
  const auto again = parse_config(echo);
  EXPECT_EQ(to_json_config(again), echo);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config(json{{"kk", 3}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"data", {{"sorce", "x"}}}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"k", 0}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"delta", 0}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"k", "eight"}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"policies", {"nope"}}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"proxy_size", 900}}), ValidationError);  // pool is 800
  EXPECT_THROW(parse_config(json{{"backend", {{"kind", "http"}, {"endpoint", "not a url"}}}}), ValidationError);
  EXPECT_THROW(parse_config(json{{"preset", "imagenet"}}), ValidationError);
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), ValidationError);
}

TEST(Presets, MatchHyperParameterTables) {
  struct Row {
    const char* name;
    std::size_t proxy, delta, alpha, k, clients, gamma;
    double quant_ratio;
  };
  const Row rows[] = {
      {"sst5", 500, 3, 0, 32, 4, 2, 0.5},  {"amazon", 750, 2, 0, 8, 2, 3, 0.5}, {"yelp", 750, 2, 2, 4, 2, 3, 0.5},
      {"mr", 500, 3, 0, 32, 4, 1, 0.5},    {"yahoo", 750, 2, 2, 4, 2, 5, 0.5},  {"agnews", 750, 2, 2, 4, 2, 2, 0.5},
      {"subj", 500, 3, 0, 32, 4, 1, 0.3},
  };
  for (const auto& r : rows) {
    const json p = preset(r.name);
    EXPECT_EQ(p.at("proxy_size"), r.proxy) << r.name;
    EXPECT_EQ(p.at("delta"), r.delta) << r.name;
    EXPECT_EQ(p.at("alpha"), r.alpha) << r.name;
    EXPECT_EQ(p.at("k"), r.k) << r.name;
    EXPECT_EQ(p.at("partition").at("num_clients"), r.clients) << r.name;
    EXPECT_EQ(p.at("partition").at("labels_per_client"), r.gamma) << r.name;
    EXPECT_EQ(p.at("quant_ratio"), r.quant_ratio) << r.name;
  }
  // Overrides merge over the preset.
  const auto c = parse_config(json{{"preset", "sst5"},
                                   {"data", {{"train", "a.jsonl"}, {"eval", "b.jsonl"}}},
                                   {"embedding", {{"path", "e.bin"}}},
                                   {"alpha", 4}});
  EXPECT_EQ(c.alpha, 4u);
  EXPECT_EQ(c.k, 32u);
  EXPECT_EQ(c.embedding.source, "file");
}

TEST(Metrics, AccuracyAndSeedSummary) {
  EXPECT_EQ(evaluate_accuracy({{1, 1}, {0, 0}}), 1.0);
  EXPECT_EQ(evaluate_accuracy({{1, 1}, {0, 1}, {std::nullopt, 2}, {2, 2}}), 0.5);
  EXPECT_THROW(evaluate_accuracy({}), ValidationError);

  const std::vector<double> v{0.5, 0.75, 0.9};
  const double mean = (0.5 + 0.75 + 0.9) / 3.0;
  const double var = ((0.5 - mean) * (0.5 - mean) + (0.75 - mean) * (0.75 - mean) + (0.9 - mean) * (0.9 - mean)) / 3.0;
  const auto s = summarize(v);
  EXPECT_NEAR(s.mean, mean, 1e-15);
  EXPECT_NEAR(s.stddev, std::sqrt(var), 1e-15);
  EXPECT_EQ(summarize({0.7}).stddev, 0.0);
}

TEST(RunExperiment, ReportStructureAndAccounting) {
  dt::TempDir tmp("run");
  const auto cfg = parse_config(small_config(tmp.path()));
  const Report r = run_experiment(cfg);
  ASSERT_EQ(r.policies.size(), 3u);
  ASSERT_EQ(r.budget_histograms.size(), 2u);
  for (const auto& seed_hist : r.budget_histograms) {
    ASSERT_EQ(seed_hist.size(), 4u);
    for (const auto& h : seed_hist) {
      std::size_t total = 0;
      for (const auto& [budget, n] : h) total += n;
      EXPECT_EQ(total, r.queries_per_seed);
    }
  }
  for (const auto& [name, p] : r.policies) {
    ASSERT_EQ(p.accuracy.size(), 2u);
    for (double a : p.accuracy) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
    // Communicated totals match the transcript sums.
    for (std::size_t s = 0; s < 2; ++s) {
      const auto ts = load_transcripts(tmp.path() / ("seed_" + std::to_string(s)) / ("transcripts_" + name + ".jsonl"));
      ASSERT_EQ(ts.size(), r.queries_per_seed);
      std::size_t sent = 0;
      for (const auto& t : ts) sent += t.total_samples_communicated;
      EXPECT_EQ(sent, p.samples_communicated[s]);
      EXPECT_NEAR(transcript_accuracy(ts), p.accuracy[s], 1e-15);
    }
  }
  const json report = json::parse(slurp(tmp.path() / "report.json"));
  EXPECT_EQ(report.at("schema_version"), 1);
  EXPECT_EQ(report.at("version"), std::string(kVersion));
  EXPECT_EQ(report.at("config"), to_json_config(cfg));
  const std::string csv = slurp(tmp.path() / "budget_histogram.csv");
  EXPECT_EQ(csv.rfind("seed,client,budget_value,count\n", 0), 0u);
}

TEST(RunExperiment, ZeroShotCommunicatesNothingAndSingletonAverages) {
  dt::TempDir tmp("run");
  auto j = small_config(tmp.path());
  j["policies"] = {"zero-shot", "singleton"};
  j["seeds"] = {3};
  const Report r = run_experiment(parse_config(j));
  EXPECT_EQ(r.policies.at("zero-shot").samples_communicated.front(), 0u);
  const auto& single = r.policies.at("singleton");
  ASSERT_EQ(single.per_client_accuracy.size(), 4u);
  double mean = 0;
  for (const auto& c : single.per_client_accuracy) mean += c.front();
  EXPECT_NEAR(single.accuracy.front(), mean / 4.0, 1e-15);
  EXPECT_TRUE(r.budget_histograms.empty());
}

TEST(RunExperiment, DeterministicAcrossOutputDirectories) {
  dt::TempDir a("det"), b("det");
  run_experiment(parse_config(small_config(a.path())));
  run_experiment(parse_config(small_config(b.path())));
  EXPECT_EQ(slurp(a.path() / "report.json"), slurp(b.path() / "report.json"));
  EXPECT_EQ(slurp(a.path() / "budget_histogram.csv"), slurp(b.path() / "budget_histogram.csv"));
  for (const char* f : {"seed_0/transcripts_learned.jsonl", "seed_1/transcripts_uniform.jsonl"})
    EXPECT_EQ(slurp(a.path() / f), slurp(b.path() / f));
}

TEST(RunExperiment, DeletingModelCacheReproducesIdenticalModels) {
  dt::TempDir tmp("cache");
  const auto cfg = parse_config(small_config(tmp.path()));
  run_experiment(cfg);
  const fs::path seed0 = tmp.path() / "seed_0";
  const std::string model = slurp(seed0 / "models" / "client_2.bin");
  const std::string budget = slurp(seed0 / "budget_dataset.jsonl");
  const auto budget_time = fs::last_write_time(seed0 / "budget_dataset.jsonl");
  const std::string report = slurp(tmp.path() / "report.json");
  fs::remove_all(seed0 / "models");
  run_experiment(cfg);
  EXPECT_EQ(slurp(seed0 / "models" / "client_2.bin"), model);
  EXPECT_EQ(slurp(seed0 / "budget_dataset.jsonl"), budget);
  EXPECT_EQ(fs::last_write_time(seed0 / "budget_dataset.jsonl"), budget_time);  // reused, not rebuilt
  EXPECT_EQ(slurp(tmp.path() / "report.json"), report);
}

TEST(RunExperiment, ChangedConfigInvalidatesDownstreamStages) {
  dt::TempDir tmp("cache");
  auto j = small_config(tmp.path());
  j["seeds"] = {0};
  run_experiment(parse_config(j));
  const auto before = load_budget_dataset(tmp.path() / "seed_0" / "budget_dataset.jsonl");
  j["delta"] = 4;
  run_experiment(parse_config(j));
  const auto after = load_budget_dataset(tmp.path() / "seed_0" / "budget_dataset.jsonl");
  EXPECT_EQ(before.delta, 2u);
  EXPECT_EQ(after.delta, 4u);
  EXPECT_EQ(load_model(tmp.path() / "seed_0" / "models" / "client_0").second.delta, 4u);
}

TEST(RunExperiment, StageErrorsNameTheStage) {
  dt::TempDir tmp("err");
  auto j = small_config(tmp.path());
  j["partition"] = {{"scheme", "noniid"}, {"num_clients", 4}, {"labels_per_client", 5}};  // 4 classes
  try {
    run_experiment(parse_config(j));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'partition'"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(fs::exists(tmp.path() / "seed_0" / "stages.json"));
}

TEST(RunExperiment, JsonlDataWithHashEmbeddings) {
  dt::TempDir tmp("jsonl");
  {
    std::ofstream train(tmp / "train.jsonl"), eval(tmp / "eval.jsonl");
    train << R"({"label_space":["sports","finance"]})" << '\n';
    eval << R"({"label_space":["sports","finance"]})" << '\n';
    const char* sports[] = {"the striker scored a late goal", "home team wins the derby", "coach praises the defense",
                            "goalkeeper saves a penalty", "midfielder signs new contract"};
    const char* finance[] = {"shares fell after earnings", "the central bank raised rates", "bond yields climb again",
                             "quarterly revenue beat forecasts", "investors sold tech stocks"};
    for (int r = 0; r < 6; ++r)
      for (int i = 0; i < 5; ++i) {
        train << json{{"text", std::string(sports[i]) + " " + std::to_string(r)}, {"label", 0}}.dump() << '\n';
        train << json{{"text", std::string(finance[i]) + " " + std::to_string(r)}, {"label", 1}}.dump() << '\n';
      }
    for (int i = 0; i < 5; ++i) {
      eval << json{{"text", std::string(sports[i]) + " today"}, {"label", 0}}.dump() << '\n';
      eval << json{{"text", std::string(finance[i]) + " today"}, {"label", 1}}.dump() << '\n';
    }
  }
  json j = {{"seeds", {0}},
            {"data", {{"source", "jsonl"}, {"train", (tmp / "train.jsonl").string()}, {"eval", (tmp / "eval.jsonl").string()}}},
            {"embedding", {{"source", "hash"}, {"dim", 64}}},
            {"partition", {{"scheme", "noniid"}, {"num_clients", 2}, {"labels_per_client", 1}}},
            {"k", 4},
            {"delta", 2},
            {"alpha", 1},
            {"proxy_size", 4},
            {"policies", {"uniform", "learned", "proxy-only"}},
            {"train", {{"epochs", 3}, {"width", 8}}},
            {"output_dir", (tmp / "out").string()}};
  const Report r = run_experiment(parse_config(j));
  EXPECT_EQ(r.queries_per_seed, 6u);
  EXPECT_TRUE(fs::exists(tmp / "out" / "seed_0" / "embeddings.jsonl"));
  const auto ts = load_transcripts(tmp / "out" / "seed_0" / "transcripts_uniform.jsonl");
  EXPECT_NE(ts.front().prompt_text.find("Output: sports"), std::string::npos);
}

TEST(EfficiencyCurve, EndpointsAndMonotonicity) {
  dt::TempDir tmp("curve");
  auto j = small_config(tmp.path());
  j["seeds"] = {0};
  const auto cfg = parse_config(j);
  run_experiment(cfg);
  const auto a = prepare_stages(cfg, 0);
  const auto ts = load_transcripts(a.dir / "transcripts_learned.jsonl");
  const std::vector<double> ms{0.0, 0.5, 1.0, 1.25, 2.0, 3.0, std::numeric_limits<double>::infinity()};
  const auto curve = budget_efficiency_curve(ts, a.clients, a.global, a.store, cfg.k, ms);
  ASSERT_EQ(curve.size(), ms.size());
  EXPECT_EQ(curve.front().mean_recall, 0.0);
  EXPECT_EQ(curve.front().mean_samples, 0.0);
  EXPECT_EQ(curve.back().mean_recall, 1.0);
  for (std::size_t i = 1; i < curve.size(); ++i)
    for (std::size_t q = 0; q < ts.size(); ++q) EXPECT_GE(curve[i].recalls[q], curve[i - 1].recalls[q]);

  // Independent recomputation at m = 1: replay the sent budgets.
  for (std::size_t q = 0; q < ts.size(); ++q) {
    const auto e = a.store.at(ts[q].query_id);
    const Embedding eq(e.begin(), e.end());
    const auto target = dt::brute_force_ids(eq, cfg.k, a.train, a.store);
    const auto out = retrieve_with_budgets(a.clients, eq, ts[q].budgets_sent, 1000000);
    std::size_t hit = 0;
    for (ExampleId id : target) hit += std::count(out.aggregated_ids.begin(), out.aggregated_ids.end(), id);
    EXPECT_DOUBLE_EQ(curve[2].recalls[q], static_cast<double>(hit) / static_cast<double>(target.size()));
  }
}

TEST(Cli, ExitCodesAndSubcommands) {
  dt::TempDir tmp("cli");
  const fs::path cfg_path = tmp / "cfg.json";
  {
    std::ofstream out(cfg_path);
    out << small_config(tmp / "out").dump(2);
  }
  auto r = run_cli("--config " + cfg_path.string() + " run", tmp.path());
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_TRUE(fs::exists(tmp / "out" / "report.json"));
  EXPECT_NE(r.out.find("learned"), std::string::npos);

  r = run_cli("--config " + cfg_path.string() + " --seed 0 report --transcripts " +
                  (tmp / "out" / "seed_0" / "transcripts_learned.jsonl").string() + " --curve 0.5,1.0,1.25",
              tmp.path());
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("mean_recall"), std::string::npos);
  EXPECT_NE(r.out.find("1.25"), std::string::npos);

  r = run_cli("report --report " + (tmp / "out" / "report.json").string(), tmp.path());
  EXPECT_EQ(r.status, 0) << r.out;

  r = run_cli("--config " + (tmp / "missing.json").string() + " run", tmp.path());
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.out.find("cannot open config"), std::string::npos);

  r = run_cli("frobnicate", tmp.path());
  EXPECT_EQ(r.status, 1);
  r = run_cli("run --bogus-flag", tmp.path());
  EXPECT_EQ(r.status, 1);

  r = run_cli("paraphrase --text \"now it 's just tired .\"", tmp.path());
  EXPECT_EQ(r.status, 0);
  EXPECT_EQ(r.out, "now it 's just tired .\n");

  {
    std::ofstream d(tmp / "d.jsonl");
    d << R"({"text":"alpha beta","label":0})" << '\n' << R"({"text":"gamma delta","label":1})" << '\n';
  }
  r = run_cli("encode --input " + (tmp / "d.jsonl").string() + " --output " + (tmp / "e.bin").string() +
                  " --dim 16 --binary",
              tmp.path());
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(load_embeddings(tmp / "e.bin").size(), 2u);

  r = run_cli("--config " + cfg_path.string() + " --out " + (tmp / "out2").string() + " --seed 5 infer --policy uniform",
              tmp.path());
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_TRUE(fs::exists(tmp / "out2" / "seed_5" / "transcripts_uniform.jsonl"));

  // A runtime (non-validation) failure exits with 2.
  fs::create_directories(tmp / "ro");
  {
    std::ofstream blocker(tmp / "ro" / "seed_0");  // a file where a directory must go
  }
  r = run_cli("--config " + cfg_path.string() + " --out " + (tmp / "ro").string() + " --seed 0 partition", tmp.path());
  EXPECT_EQ(r.status, 2) << r.out;
}
