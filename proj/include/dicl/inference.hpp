#pragma once

// Prompt construction and answering backends.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "dicl/corpus.hpp"
#include "dicl/error.hpp"

namespace dicl {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

struct PromptTemplate {
  std::string instruction;
  std::string example_format = "Input: {text}\nOutput: {label}";
  std::string query_format = "Input: {text}\nOutput:";
  std::string joiner = "\n\n";
  // Most similar example placed last, adjacent to the query.
  bool nearest_last = true;

  void validate() const;
};

namespace detail {

inline std::size_t count_occurrences(std::string_view s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

inline std::string replace_once(std::string s, std::string_view key, std::string_view value) {
  const auto pos = s.find(key);
  if (pos != std::string::npos) s.replace(pos, key.size(), value);
  return s;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace detail

inline void PromptTemplate::validate() const {
  using detail::count_occurrences;
  if (count_occurrences(example_format, "{text}") != 1 || count_occurrences(example_format, "{label}") != 1)
    throw ValidationError("example_format must contain {text} and {label} exactly once each");
  if (count_occurrences(query_format, "{text}") != 1 || count_occurrences(query_format, "{label}") != 0)
    throw ValidationError("query_format must contain {text} exactly once and no {label}");
  if (count_occurrences(instruction, "{text}") != 0 || count_occurrences(instruction, "{label}") != 0)
    throw ValidationError("instruction must not contain placeholders");
}

inline void to_json(nlohmann::json& j, const PromptTemplate& t) {
  j = {{"instruction", t.instruction},
       {"example_format", t.example_format},
       {"query_format", t.query_format},
       {"joiner", t.joiner},
       {"nearest_last", t.nearest_last}};
}

inline void from_json(const nlohmann::json& j, PromptTemplate& t) {
  t.instruction = j.value("instruction", t.instruction);
  t.example_format = j.value("example_format", t.example_format);
  t.query_format = j.value("query_format", t.query_format);
  t.joiner = j.value("joiner", t.joiner);
  t.nearest_last = j.value("nearest_last", t.nearest_last);
}

struct PromptExample {
  std::string text;
  int label = 0;
};

// Examples are rendered in the given order, then the query.
inline std::string build_prompt(const std::vector<PromptExample>& ices, std::string_view query_text,
                                const PromptTemplate& tmpl, const LabelSpace& labels) {
  tmpl.validate();
  std::string out;
  if (!tmpl.instruction.empty()) {
    out += tmpl.instruction;
    out += tmpl.joiner;
  }
  for (const auto& ice : ices) {
    if (!labels.contains(ice.label))
      throw ValidationError("in-context example label " + std::to_string(ice.label) + " is outside the label space");
    std::string rendered = detail::replace_once(tmpl.example_format, "{label}", labels.verbalizer(ice.label));
    // Substitute text last so braces inside the text are never re-expanded.
    rendered = detail::replace_once(rendered, "{text}", ice.text);
    out += rendered;
    out += tmpl.joiner;
  }
  out += detail::replace_once(tmpl.query_format, "{text}", query_text);
  return out;
}

// ---------------------------------------------------------------------------
// Answering
// ---------------------------------------------------------------------------

struct VotingExample {
  int label = 0;
  double distance = 0.0;
};

inline constexpr double kMockVoteEpsilon = 1e-6;

// Similarity-weighted vote: weight 1 / (eps + distance) per example; highest
// total wins, lowest label on ties; label 0 with no examples.
inline int answer_mock(const std::vector<VotingExample>& ices, std::size_t num_labels) {
  if (ices.empty() || num_labels == 0) return 0;
  std::vector<double> weight(num_labels, 0.0);
  for (const auto& ice : ices) {
    if (ice.label < 0 || static_cast<std::size_t>(ice.label) >= num_labels)
      throw ValidationError("vote label out of range");
    weight[static_cast<std::size_t>(ice.label)] += 1.0 / (kMockVoteEpsilon + ice.distance);
  }
  return static_cast<int>(std::max_element(weight.begin(), weight.end()) - weight.begin());
}

// Earliest verbalizer occurrence in the completion, case-insensitive; at the
// same position the longer verbalizer wins.
inline std::optional<int> decode_verbalizer(std::string_view completion, const LabelSpace& labels) {
  const std::string hay = detail::lower(completion);
  std::optional<int> best;
  std::size_t best_pos = std::string::npos;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < labels.count(); ++i) {
    const std::string needle = detail::lower(labels.verbalizer(static_cast<int>(i)));
    const auto pos = hay.find(needle);
    if (pos == std::string::npos) continue;
    if (pos < best_pos || (pos == best_pos && needle.size() > best_len)) {
      best = static_cast<int>(i);
      best_pos = pos;
      best_len = needle.size();
    }
  }
  return best;
}

struct AnswerRequest {
  std::string prompt;
  std::vector<VotingExample> ices;
  const LabelSpace* labels = nullptr;
};

struct Answer {
  std::optional<int> label;  // empty on decode failure
  std::string raw_completion;
};

class AnsweringBackend {
 public:
  virtual ~AnsweringBackend() = default;
  virtual Answer answer(const AnswerRequest& request) const = 0;
  virtual std::string complete(const std::string& prompt) const = 0;
  virtual bool is_mock() const noexcept { return false; }
  virtual std::string name() const = 0;
};

class MockVoteBackend final : public AnsweringBackend {
 public:
  Answer answer(const AnswerRequest& request) const override {
    const int label = answer_mock(request.ices, request.labels ? request.labels->count() : 0);
    return {label, ""};
  }
  // Echoes the prompt; paraphrasing through the mock is the identity.
  std::string complete(const std::string& prompt) const override { return prompt; }
  bool is_mock() const noexcept override { return true; }
  std::string name() const override { return "mock"; }
};

struct HttpBackendConfig {
  std::string endpoint;  // base URL, e.g. http://localhost:8000/v1
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  int timeout_seconds = 60;
  int max_retries = 3;
  int backoff_ms = 500;
  int max_tokens = 8;
  std::string response_pointer = "/choices/0/text";
  std::size_t max_in_flight = 4;
};

inline void to_json(nlohmann::json& j, const HttpBackendConfig& c) {
  j = {{"endpoint", c.endpoint},       {"model", c.model},
       {"api_key_env", c.api_key_env}, {"timeout_seconds", c.timeout_seconds},
       {"max_retries", c.max_retries}, {"backoff_ms", c.backoff_ms},
       {"max_tokens", c.max_tokens},   {"response_pointer", c.response_pointer},
       {"max_in_flight", c.max_in_flight}};
}

inline void from_json(const nlohmann::json& j, HttpBackendConfig& c) {
  c.endpoint = j.value("endpoint", c.endpoint);
  c.model = j.value("model", c.model);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.response_pointer = j.value("response_pointer", c.response_pointer);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
}

struct ParsedUrl {
  std::string scheme_host_port;  // what httplib::Client takes
  std::string base_path;         // without trailing slash
};

inline ParsedUrl parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?)://([A-Za-z0-9.\-]+|\[[0-9A-Fa-f:]+\])(:[0-9]{1,5})?(/[^\s?#]*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ValidationError("malformed endpoint URL '" + url + "'");
  ParsedUrl out;
  out.scheme_host_port = m[1].str() + "://" + m[2].str() + m[3].str();
  out.base_path = m[4].str();
  while (!out.base_path.empty() && out.base_path.back() == '/') out.base_path.pop_back();
  return out;
}

// Completions-style client: POST {endpoint}/completions with
// {model, prompt, max_tokens, temperature: 0}; generated text is read at
// `response_pointer`. Retries transport failures, 429 and 5xx responses with
// exponential backoff.
class HttpBackend final : public AnsweringBackend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)), url_(parse_endpoint(cfg_.endpoint)) {
    if (cfg_.max_retries < 0) throw ValidationError("max_retries must be >= 0");
    if (cfg_.timeout_seconds <= 0) throw ValidationError("timeout_seconds must be > 0");
  }

  const HttpBackendConfig& config() const noexcept { return cfg_; }

  std::string complete(const std::string& prompt) const override {
    const nlohmann::json body = {
        {"model", cfg_.model}, {"prompt", prompt}, {"max_tokens", cfg_.max_tokens}, {"temperature", 0}};
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long long>(cfg_.backoff_ms) << (attempt - 1)));
      httplib::Client client(url_.scheme_host_port);
      client.set_connection_timeout(cfg_.timeout_seconds, 0);
      client.set_read_timeout(cfg_.timeout_seconds, 0);
      client.set_write_timeout(cfg_.timeout_seconds, 0);
      auto res = client.Post(url_.base_path + "/completions", headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw BackendError("completion request failed with HTTP " + std::to_string(res->status) + ": " + res->body);
      try {
        const auto parsed = nlohmann::json::parse(res->body);
        return parsed.at(nlohmann::json::json_pointer(cfg_.response_pointer)).get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("unexpected completion response: ") + e.what());
      }
    }
    throw BackendError("completion request failed after " + std::to_string(cfg_.max_retries + 1) +
                       " attempts: " + last_error);
  }

  Answer answer(const AnswerRequest& request) const override {
    std::string raw = complete(request.prompt);
    return {decode_verbalizer(raw, *request.labels), std::move(raw)};
  }

  std::string name() const override { return "http"; }

 private:
  HttpBackendConfig cfg_;
  ParsedUrl url_;
};

// Throws DecodeError (carrying the raw completion) when no verbalizer matches.
inline int answer_http(const std::string& prompt, const AnsweringBackend& backend, const LabelSpace& labels) {
  std::string raw = backend.complete(prompt);
  auto label = decode_verbalizer(raw, labels);
  if (!label) throw DecodeError("no verbalizer found in completion", std::move(raw));
  return *label;
}

// Few-shot paraphrase instruction; {text} is the sentence to rewrite.
inline constexpr std::string_view kDefaultParaphraseTemplate =
    "Please paraphrase the original sentence. Original sentence: \"a stirring, funny and finally transporting "
    "re-imagining of beauty and the beast and 1930s horror films\" Paraphrased sentence: A captivating, humorous, "
    "and ultimately uplifting reinterpretation of Beauty and the Beast combined with 1930s horror films.\n"
    "Please paraphrase the original sentence. Original sentence: \"jonathan parker 's bartleby should have been the "
    "be-all-end-all of the modern-office anomie films\" Paraphrased sentence: Jonathan Parker's \"Bartleby\" had the "
    "potential to be the definitive film capturing the sense of alienation in modern office settings.\n"
    "Please paraphrase the original sentence. Original sentence: \"a fan film that for the uninitiated plays better "
    "on video with the sound turned down\" Paraphrased sentence: A fan film that, for those not familiar with the "
    "source material, is more enjoyable when watched with the sound turned off.\n"
    "Please paraphrase the original sentence. Original sentence: \"apparently reassembled from the cutting-room "
    "floor of any given daytime soap\" Paraphrased sentence: It appears to be pieced together from the outtakes of "
    "any given daytime soap opera.\n"
    "Please paraphrase the original sentence. Original sentence: \"{text}\" Paraphrased sentence:";

inline std::string paraphrase(const std::string& text, const AnsweringBackend& backend,
                              std::string_view paraphrase_template = kDefaultParaphraseTemplate) {
  if (text.empty()) throw ValidationError("cannot paraphrase empty text");
  if (backend.is_mock()) return text;
  if (detail::count_occurrences(paraphrase_template, "{text}") != 1)
    throw ValidationError("paraphrase template must contain {text} exactly once");
  const std::string prompt = detail::replace_once(std::string(paraphrase_template), "{text}", text);
  std::string out = backend.complete(prompt);
  const auto first = out.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  out.erase(0, first);
  if (const auto nl = out.find('\n'); nl != std::string::npos) out.resize(nl);
  const auto last = out.find_last_not_of(" \t\r");
  return out.substr(0, last + 1);
}

inline std::unique_ptr<AnsweringBackend> make_mock_backend() { return std::make_unique<MockVoteBackend>(); }

}  // namespace dicl
