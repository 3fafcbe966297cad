#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "httplib.h"

#include "dicl/inference.hpp"

using namespace dicl;
using json = nlohmann::json;

namespace {

const LabelSpace kSentiment({"negative", "positive"});

// Local completions endpoint. Responds with `replies` in order (the last one
// repeats); an integer reply is sent as that HTTP status with an empty body.
class StubServer {
 public:
  explicit StubServer(std::vector<json> replies) : replies_(std::move(replies)) {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      requests_.push_back(json::parse(req.body));
      auth_.push_back(req.get_header_value("Authorization"));
      const json& reply = replies_[std::min(calls_, replies_.size() - 1)];
      ++calls_;
      if (reply.is_number_integer()) {
        res.status = reply.get<int>();
        return;
      }
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  std::size_t calls() {
    std::lock_guard lock(mu_);
    return calls_;
  }
  json request(std::size_t i) {
    std::lock_guard lock(mu_);
    return requests_.at(i);
  }
  std::string auth(std::size_t i) {
    std::lock_guard lock(mu_);
    return auth_.at(i);
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::vector<json> replies_;
  std::vector<json> requests_;
  std::vector<std::string> auth_;
  std::size_t calls_ = 0;
};

json completion(const std::string& text) { return {{"choices", {{{"text", text}}}}}; }

HttpBackendConfig config_for(const StubServer& s) {
  HttpBackendConfig c;
  c.endpoint = s.endpoint();
  c.model = "toy-model";
  c.api_key_env = "DICL_TEST_API_KEY";
  c.backoff_ms = 1;
  c.max_retries = 2;
  c.timeout_seconds = 5;
  return c;
}

}  // namespace

TEST(BuildPrompt, ZeroShotIsInstructionAndQuery) {
  PromptTemplate t;
  t.instruction = "Classify the sentiment.";
  EXPECT_EQ(build_prompt({}, "great film", t, kSentiment), "Classify the sentiment.\n\nInput: great film\nOutput:");
  t.instruction.clear();
  EXPECT_EQ(build_prompt({}, "great film", t, kSentiment), "Input: great film\nOutput:");
}

TEST(BuildPrompt, TwoExamplesThenQuery) {
  PromptTemplate t;
  const std::string p = build_prompt({{"bad", 0}, {"good", 1}}, "fine", t, kSentiment);
  EXPECT_EQ(p, "Input: bad\nOutput: negative\n\nInput: good\nOutput: positive\n\nInput: fine\nOutput:");
  EXPECT_NE(build_prompt({{"good", 1}, {"bad", 0}}, "fine", t, kSentiment), p);
}

TEST(BuildPrompt, BracesInTextAreLiteral) {
  PromptTemplate t;
  EXPECT_EQ(build_prompt({{"a {label} b", 1}}, "{text}", t, kSentiment),
            "Input: a {label} b\nOutput: positive\n\nInput: {text}\nOutput:");
}

TEST(BuildPrompt, PlaceholderAndLabelErrors) {
  PromptTemplate t;
  t.example_format = "Input: {text}";
  EXPECT_THROW(build_prompt({}, "q", t, kSentiment), ValidationError);
  t = PromptTemplate{};
  t.query_format = "{text} {text}";
  EXPECT_THROW(build_prompt({}, "q", t, kSentiment), ValidationError);
  t = PromptTemplate{};
  t.instruction = "say {label}";
  EXPECT_THROW(t.validate(), ValidationError);
  EXPECT_THROW(build_prompt({{"x", 5}}, "q", PromptTemplate{}, kSentiment), ValidationError);
}

TEST(AnswerMock, Examples) {
  EXPECT_EQ(answer_mock({{3, 0.4}, {3, 2.0}, {3, 1.0}}, 5), 3);
  EXPECT_EQ(answer_mock({}, 5), 0);
  // One exact match outweighs many distant neighbours: 1/1e-6 vs 50 * 1/10.
  std::vector<VotingExample> many(50, {1, 10.0});
  many.push_back({2, 0.0});
  EXPECT_EQ(answer_mock(many, 3), 2);
  // Ties go to the lowest label.
  EXPECT_EQ(answer_mock({{2, 1.0}, {1, 1.0}}, 3), 1);
  // Weight arithmetic: 1/(1e-6+0.5) = 1.999996 vs 1/(1e-6+1) * 2 = 1.999998.
  EXPECT_EQ(answer_mock({{0, 0.5}, {1, 1.0}, {1, 1.0}}, 2), 1);
  EXPECT_THROW(answer_mock({{4, 1.0}}, 2), ValidationError);
}

TEST(DecodeVerbalizer, Rules) {
  EXPECT_EQ(decode_verbalizer("positive.", kSentiment), 1);
  EXPECT_EQ(decode_verbalizer(" Positive", kSentiment), 1);
  EXPECT_EQ(decode_verbalizer("NEGATIVE, not positive", kSentiment), 0);
  EXPECT_EQ(decode_verbalizer("neutral", kSentiment), std::nullopt);
  const LabelSpace overlap({"great", "very great"});
  EXPECT_EQ(decode_verbalizer("very great!", overlap), 1);
}

TEST(ParseEndpoint, WellFormedAndMalformed) {
  EXPECT_EQ(parse_endpoint("http://localhost:8000/v1/").base_path, "/v1");
  EXPECT_EQ(parse_endpoint("https://api.example.com").scheme_host_port, "https://api.example.com");
  EXPECT_THROW(parse_endpoint("localhost:8000"), ValidationError);
  EXPECT_THROW(parse_endpoint("ftp://x"), ValidationError);
  EXPECT_THROW(parse_endpoint("http://bad host/"), ValidationError);
  HttpBackendConfig c;
  c.endpoint = "nope";
  EXPECT_THROW(HttpBackend{c}, ValidationError);
}

TEST(HttpBackend, SendsDocumentedRequestAndDecodes) {
  StubServer server(std::vector<json>{completion(" Positive.\nmore")});
  setenv("DICL_TEST_API_KEY", "sk-test", 1);
  HttpBackend backend(config_for(server));
  EXPECT_EQ(answer_http("Input: fine\nOutput:", backend, kSentiment), 1);
  const json req = server.request(0);
  EXPECT_EQ(req.at("model"), "toy-model");
  EXPECT_EQ(req.at("prompt"), "Input: fine\nOutput:");
  EXPECT_EQ(req.at("temperature"), 0);
  EXPECT_EQ(req.at("max_tokens"), 8);
  EXPECT_EQ(server.auth(0), "Bearer sk-test");
  unsetenv("DICL_TEST_API_KEY");
}

TEST(HttpBackend, RetriesServerErrorsThenSucceeds) {
  StubServer server(std::vector<json>{json(500), json(429), completion("negative")});
  HttpBackend backend(config_for(server));
  const Answer a = backend.answer({"p", {}, &kSentiment});
  EXPECT_EQ(a.label, 0);
  EXPECT_EQ(server.calls(), 3u);
}

TEST(HttpBackend, GivesUpAfterMaxRetries) {
  StubServer server(std::vector<json>{json(503)});
  HttpBackend backend(config_for(server));
  EXPECT_THROW(backend.complete("p"), BackendError);
  EXPECT_EQ(server.calls(), 3u);
}

TEST(HttpBackend, ClientErrorIsNotRetried) {
  StubServer server(std::vector<json>{json(400)});
  HttpBackend backend(config_for(server));
  EXPECT_THROW(backend.complete("p"), BackendError);
  EXPECT_EQ(server.calls(), 1u);
}

TEST(HttpBackend, TransportFailure) {
  HttpBackendConfig c;
  c.endpoint = "http://127.0.0.1:1/v1";
  c.max_retries = 1;
  c.backoff_ms = 1;
  c.timeout_seconds = 1;
  EXPECT_THROW(HttpBackend(c).complete("p"), BackendError);
}

TEST(HttpBackend, DecodeErrorKeepsRawCompletion) {
  StubServer server(std::vector<json>{completion("I am not sure")});
  HttpBackend backend(config_for(server));
  try {
    answer_http("p", backend, kSentiment);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.raw_completion(), "I am not sure");
  }
  const Answer a = backend.answer({"p", {}, &kSentiment});
  EXPECT_FALSE(a.label.has_value());
  EXPECT_EQ(a.raw_completion, "I am not sure");
}

TEST(HttpBackend, UnexpectedResponseShape) {
  StubServer server(std::vector<json>{json{{"output", "positive"}}});
  HttpBackend backend(config_for(server));
  EXPECT_THROW(backend.complete("p"), BackendError);
}

TEST(Paraphrase, MockIsIdentityAndEmptyIsRejected) {
  MockVoteBackend mock;
  EXPECT_EQ(paraphrase("now it 's just tired .", mock), "now it 's just tired .");
  EXPECT_THROW(paraphrase("", mock), ValidationError);
}

TEST(Paraphrase, RendersTemplateAndTrimsAtFirstNewline) {
  StubServer server(std::vector<json>{completion("  It is now simply outdated.\nPlease paraphrase ...")});
  HttpBackend backend(config_for(server));
  EXPECT_EQ(paraphrase("now it 's just tired .", backend), "It is now simply outdated.");
  const std::string prompt = server.request(0).at("prompt");
  EXPECT_NE(prompt.find("Original sentence: \"now it 's just tired .\" Paraphrased sentence:"), std::string::npos);
  EXPECT_EQ(prompt.find("{text}"), std::string::npos);
  EXPECT_THROW(paraphrase("x", backend, "no slot"), ValidationError);
}
