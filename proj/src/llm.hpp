#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "classifier.hpp"
#include "data.hpp"

namespace selftrain {

enum class LlmErrorCode {
  Transport,
  Parse,
  PromptTooLong,
  FixtureMiss,
  MalformedFixture,
  MissingField,
  Aborted,
  Config,
};

const char* to_string(LlmErrorCode code);

class LlmError : public Error {
 public:
  LlmError(LlmErrorCode code, const std::string& what, bool retryable = false)
      : Error(ErrorKind::Llm, what), code_(code), retryable_(retryable) {}
  LlmErrorCode code() const noexcept { return code_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  LlmErrorCode code_;
  bool retryable_;
};

// ---------------------------------------------------------------------------
// Wire protocol

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  // Request fingerprint for fixtures and jitter; never sent on the wire.
  std::string instance_id;
};

/// {"model", "messages": [{"role", "content"}], "temperature"}
nlohmann::json to_wire(const ChatRequest& request);
/// Content of choices[0].message.content.
std::string content_from_wire(const std::string& body);

/// One delivery attempt. Transient failures throw a retryable LlmError.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string send(const ChatRequest& request) = 0;
};

struct LlmClientConfig {
  std::string endpoint;  // e.g. https://api.example.com/v1/chat/completions
  std::string model;
  double temperature = 0.0;
  std::chrono::milliseconds timeout{30000};
  std::size_t max_retries = 3;
  std::size_t max_in_flight = 4;
  std::string auth_env = "LLM_API_KEY";
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds max_delay{5000};
  std::uint64_t seed = 0;  // backoff jitter

  void validate() const;
};

/// Chat-completion POST over cpp-httplib; bearer token read from auth_env.
class HttpTransport final : public ChatTransport {
 public:
  explicit HttpTransport(LlmClientConfig config);
  std::string send(const ChatRequest& request) override;

 private:
  LlmClientConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Replays a JSONL fixture:
///   {"match": {"mode": "sequence"|"by_id", "key": ...}, "response": "...",
///    "failures_before_success": 0, "latency_ms": 0}
/// by_id entries match the request's instance id; otherwise the next unconsumed
/// sequence entry answers. A scripted failure does not consume its entry.
class MockTransport final : public ChatTransport {
 public:
  struct Entry {
    bool by_id = false;
    std::string key;
    std::string response;
    std::size_t failures_before_success = 0;
    std::chrono::milliseconds latency{0};
  };

  explicit MockTransport(std::vector<Entry> entries);
  static std::shared_ptr<MockTransport> from_jsonl(std::istream& in, const std::string& provenance = "<stream>");
  static std::shared_ptr<MockTransport> from_file(const std::filesystem::path& path);

  std::string send(const ChatRequest& request) override;
  std::size_t attempts() const noexcept { return attempts_.load(); }

 private:
  std::mutex mutex_;
  std::vector<Entry> entries_;
  std::vector<std::size_t> sequence_;  // indices of sequence entries, in file order
  std::size_t next_sequence_ = 0;
  std::vector<std::size_t> remaining_failures_;
  std::atomic<std::size_t> attempts_{0};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct RetryPolicy {
  std::size_t max_retries = 3;
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds max_delay{5000};
  std::uint64_t seed = 0;

  /// Exponential backoff with jitter in [0.5, 1.0) of the capped delay,
  /// a pure function of (seed, request fingerprint, retry index).
  std::chrono::milliseconds delay(std::string_view fingerprint, std::size_t retry) const;
};

/// Thread-safe client: transport plus retry/backoff.
class LlmClient {
 public:
  LlmClient(std::shared_ptr<ChatTransport> transport, RetryPolicy retry, Sleeper sleeper = {});

  std::string complete(const ChatRequest& request) const;
  std::size_t retries() const noexcept { return retries_.load(); }

 private:
  std::shared_ptr<ChatTransport> transport_;
  RetryPolicy retry_;
  Sleeper sleeper_;
  mutable std::atomic<std::size_t> retries_{0};
};

RetryPolicy retry_policy(const LlmClientConfig& config);
std::unique_ptr<LlmClient> http_client(const LlmClientConfig& config);
std::unique_ptr<LlmClient> mock_client(const std::filesystem::path& fixture, const RetryPolicy& retry,
                                       Sleeper sleeper = {});

// ---------------------------------------------------------------------------
// Prompts and parsing

enum class LlmMode { Sub, Obj, ObjConf, ObjConfScore };

LlmMode parse_mode(std::string_view name);  // sub | obj | obj-conf | obj-conf-score
const char* to_string(LlmMode mode);

struct PromptTemplate {
  std::string version = "sentiment-v1";
  std::string system;
  std::string instruction;    // "{labels}" expands to the class list
  std::string examples_header;
  std::string example_format;  // "{text}", "{label}"
  std::string query_format;    // "{text}"
  std::string answer_label;
  std::string answer_confident;
  std::string answer_score;
  std::size_t max_prompt_chars = 16000;

  static PromptTemplate builtin();
  static PromptTemplate from_json(const nlohmann::json& j);
  static PromptTemplate load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct FewShotExample {
  std::string text;
  ClassIndex label = 0;
};

/// Throws LlmError(PromptTooLong) when the user message exceeds max_prompt_chars.
std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl, const std::vector<std::string>& class_names,
                                       std::string_view text, const std::vector<FewShotExample>& examples,
                                       LlmMode mode);

/// n per class, class-interleaved (c0, c1, ..., c0, c1, ...), seeded.
std::vector<FewShotExample> select_few_shot(const Dataset& labeled, std::size_t n_shot, std::uint64_t seed);

struct ParsedAnswer {
  ClassIndex label = 0;
  std::optional<bool> confident;
  std::optional<double> score;
};

/// Case-insensitive whole-word class match on the text before the first '|'.
/// Exactly one class must match. ObjConf reads "confident: yes|no", ObjConfScore
/// reads "score: <decimal>" and rejects values outside [0, 1].
ParsedAnswer parse_answer(std::string_view response, const std::vector<std::string>& class_names, LlmMode mode);

// ---------------------------------------------------------------------------
// Pipelines

struct LlmLabelRecord {
  std::string instance_id;
  std::optional<ClassIndex> label;
  std::optional<bool> confident;
  std::optional<double> score;
  std::string raw_response;
  std::optional<LlmErrorCode> error_code;
  std::string error;

  bool ok() const noexcept { return !error_code.has_value(); }
};

nlohmann::json to_json(const LlmLabelRecord& record, const std::vector<std::string>& class_names);

struct LabelingOptions {
  std::string model;
  double temperature = 0.0;
  std::size_t max_in_flight = 4;
  double failure_limit = 0.10;  // abort when failures / pool exceeds this
};

/// Raised when the failure fraction exceeds the limit; carries every record.
class LlmAborted : public LlmError {
 public:
  LlmAborted(const std::string& what, std::vector<LlmLabelRecord> records)
      : LlmError(LlmErrorCode::Aborted, what), records_(std::move(records)) {}
  const std::vector<LlmLabelRecord>& records() const noexcept { return records_; }

 private:
  std::vector<LlmLabelRecord> records_;
};

/// Single classification (Sub mode, or one Obj query).
ParsedAnswer llm_query(const LlmClient& client, const PromptTemplate& tmpl,
                       const std::vector<std::string>& class_names, std::string_view text,
                       const std::vector<FewShotExample>& examples, LlmMode mode,
                       const LabelingOptions& options, const std::string& instance_id = {});

/// LLM as classifier. examples.size() must equal n_shot * C.
ClassIndex llm_classify(const LlmClient& client, const PromptTemplate& tmpl,
                        const std::vector<std::string>& class_names, std::string_view text,
                        const std::vector<FewShotExample>& examples, std::size_t n_shot,
                        const LabelingOptions& options = {});

/// One record per pool instance, ordered by instance id. Requests run on up to
/// max_in_flight threads. Per-instance failures become error records.
std::vector<LlmLabelRecord> llm_pseudo_label(const LlmClient& client, const PromptTemplate& tmpl,
                                             const Dataset& pool, LlmMode mode,
                                             const std::vector<FewShotExample>& examples, std::size_t n_shot,
                                             const LabelingOptions& options = {});

/// Obj keeps every labeled record, ObjConf those marked confident, ObjConfScore
/// those with score > threshold. Failed records are never kept.
std::vector<std::pair<std::string, ClassIndex>> filter_records(const std::vector<LlmLabelRecord>& records,
                                                               LlmMode mode,
                                                               std::optional<double> threshold = std::nullopt);

/// Supervised training on gold seed data plus pseudo-labeled pool texts; gold
/// labels win on id collisions.
std::unique_ptr<TextClassifier> train_slm_on_pseudo_labels(
    const std::vector<std::pair<std::string, ClassIndex>>& filtered, const Dataset& pool,
    const Dataset& labeled_seed, const ClassifierFactory& make_classifier, const Dataset* validation = nullptr);

}  // namespace selftrain
