#include "llm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

namespace selftrain {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || u >= 0x80;
}

bool contains_word(const std::string& haystack, const std::string& needle) {
  if (needle.empty()) return false;
  for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) {
    const bool left = pos == 0 || !is_word_char(haystack[pos - 1]);
    const auto end = pos + needle.size();
    const bool right = end == haystack.size() || !is_word_char(haystack[end]);
    if (left && right) return true;
  }
  return false;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

}  // namespace

const char* to_string(LlmErrorCode code) {
  switch (code) {
    case LlmErrorCode::Transport: return "transport";
    case LlmErrorCode::Parse: return "parse";
    case LlmErrorCode::PromptTooLong: return "prompt_too_long";
    case LlmErrorCode::FixtureMiss: return "fixture_miss";
    case LlmErrorCode::MalformedFixture: return "malformed_fixture";
    case LlmErrorCode::MissingField: return "missing_field";
    case LlmErrorCode::Aborted: return "aborted";
    case LlmErrorCode::Config: return "config";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Wire protocol

json to_wire(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  return {{"model", request.model}, {"messages", std::move(messages)}, {"temperature", request.temperature}};
}

std::string content_from_wire(const std::string& body) {
  try {
    const auto j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw LlmError(LlmErrorCode::Transport, std::string("unexpected response body: ") + e.what());
  }
}

void LlmClientConfig::validate() const {
  if (!(temperature >= 0.0)) throw LlmError(LlmErrorCode::Config, "temperature must be >= 0");
  if (max_in_flight == 0) throw LlmError(LlmErrorCode::Config, "max_in_flight must be >= 1");
  if (timeout.count() <= 0) throw LlmError(LlmErrorCode::Config, "timeout must be positive");
}

// ---------------------------------------------------------------------------
// Mock transport

MockTransport::MockTransport(std::vector<Entry> entries) : entries_(std::move(entries)) {
  std::set<std::string> keys;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    remaining_failures_.push_back(entries_[i].failures_before_success);
    if (!entries_[i].by_id) {
      sequence_.push_back(i);
    } else if (!keys.insert(entries_[i].key).second) {
      throw LlmError(LlmErrorCode::MalformedFixture, "duplicate by_id fixture key '" + entries_[i].key + "'");
    }
  }
}

std::shared_ptr<MockTransport> MockTransport::from_jsonl(std::istream& in, const std::string& provenance) {
  std::vector<Entry> entries;
  std::string line;
  std::size_t line_no = 0;
  const std::set<std::string> allowed = {"match", "response", "failures_before_success", "latency_ms"};
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = provenance + ":" + std::to_string(line_no);
    try {
      const auto j = json::parse(line);
      for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw LlmError(LlmErrorCode::MalformedFixture, where + ": unknown key '" + key + "'");
      }
      Entry e;
      const auto& match = j.at("match");
      const auto mode = match.at("mode").get<std::string>();
      if (mode == "by_id") {
        e.by_id = true;
        e.key = match.at("key").get<std::string>();
      } else if (mode == "sequence") {
        if (match.contains("key") && !match.at("key").is_null()) e.key = match.at("key").dump();
      } else {
        throw LlmError(LlmErrorCode::MalformedFixture, where + ": unknown match mode '" + mode + "'");
      }
      e.response = j.at("response").get<std::string>();
      e.failures_before_success = j.value("failures_before_success", std::size_t{0});
      e.latency = std::chrono::milliseconds(j.value("latency_ms", 0));
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw LlmError(LlmErrorCode::MalformedFixture, where + ": " + ex.what());
    }
  }
  return std::make_shared<MockTransport>(std::move(entries));
}

std::shared_ptr<MockTransport> MockTransport::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open fixture '" + path.string() + "'");
  return from_jsonl(in, path.string());
}

std::string MockTransport::send(const ChatRequest& request) {
  ++attempts_;
  std::chrono::milliseconds latency{0};
  std::string response;
  {
    std::lock_guard lock(mutex_);
    std::optional<std::size_t> index;
    bool sequential = false;
    if (!request.instance_id.empty()) {
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].by_id && entries_[i].key == request.instance_id) {
          index = i;
          break;
        }
      }
    }
    if (!index && next_sequence_ < sequence_.size()) {
      index = sequence_[next_sequence_];
      sequential = true;
    }
    if (!index) {
      throw LlmError(LlmErrorCode::FixtureMiss,
                     "no fixture entry for request" +
                         (request.instance_id.empty() ? std::string() : " '" + request.instance_id + "'"));
    }
    const auto& entry = entries_[*index];
    latency = entry.latency;
    if (remaining_failures_[*index] > 0) {
      --remaining_failures_[*index];
      throw LlmError(LlmErrorCode::Transport, "scripted transport failure", /*retryable=*/true);
    }
    if (sequential) ++next_sequence_;
    response = entry.response;
  }
  if (latency.count() > 0) std::this_thread::sleep_for(latency);
  return response;
}

// ---------------------------------------------------------------------------
// Retrying client

std::chrono::milliseconds RetryPolicy::delay(std::string_view fingerprint, std::size_t retry) const {
  const double capped = std::min(static_cast<double>(max_delay.count()),
                                 static_cast<double>(base_delay.count()) * std::ldexp(1.0, static_cast<int>(std::min<std::size_t>(retry, 30))));
  Rng rng(derive_seed(derive_seed(seed, fingerprint), retry));
  const double jitter = 0.5 + 0.5 * rng.uniform();
  return std::chrono::milliseconds(static_cast<long long>(capped * jitter));
}

LlmClient::LlmClient(std::shared_ptr<ChatTransport> transport, RetryPolicy retry, Sleeper sleeper)
    : transport_(std::move(transport)), retry_(retry), sleeper_(std::move(sleeper)) {
  if (!transport_) throw InvalidArgument("LLM client requires a transport");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::string LlmClient::complete(const ChatRequest& request) const {
  const std::string fingerprint =
      request.instance_id.empty() && !request.messages.empty() ? request.messages.back().content : request.instance_id;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return transport_->send(request);
    } catch (const LlmError& e) {
      if (!e.retryable() || attempt >= retry_.max_retries) {
        if (e.retryable()) {
          throw LlmError(e.code(), std::string(e.what()) + " (after " + std::to_string(attempt + 1) + " attempts)");
        }
        throw;
      }
      ++retries_;
      sleeper_(retry_.delay(fingerprint, attempt));
    }
  }
}

RetryPolicy retry_policy(const LlmClientConfig& config) {
  return RetryPolicy{config.max_retries, config.base_delay, config.max_delay, config.seed};
}

std::unique_ptr<LlmClient> http_client(const LlmClientConfig& config) {
  config.validate();
  return std::make_unique<LlmClient>(std::make_shared<HttpTransport>(config), retry_policy(config));
}

std::unique_ptr<LlmClient> mock_client(const std::filesystem::path& fixture, const RetryPolicy& retry,
                                       Sleeper sleeper) {
  return std::make_unique<LlmClient>(MockTransport::from_file(fixture), retry, std::move(sleeper));
}

// ---------------------------------------------------------------------------
// Prompts

LlmMode parse_mode(std::string_view name) {
  if (name == "sub") return LlmMode::Sub;
  if (name == "obj") return LlmMode::Obj;
  if (name == "obj-conf" || name == "obj_conf") return LlmMode::ObjConf;
  if (name == "obj-conf-score" || name == "obj_conf_score") return LlmMode::ObjConfScore;
  throw LlmError(LlmErrorCode::Config, "unknown LLM mode '" + std::string(name) + "'");
}

const char* to_string(LlmMode mode) {
  switch (mode) {
    case LlmMode::Sub: return "sub";
    case LlmMode::Obj: return "obj";
    case LlmMode::ObjConf: return "obj-conf";
    case LlmMode::ObjConfScore: return "obj-conf-score";
  }
  return "unknown";
}

PromptTemplate PromptTemplate::builtin() {
  PromptTemplate t;
  t.system = "You are a sentiment analysis assistant.";
  t.instruction = "Classify the sentiment of the text as one of: {labels}.";
  t.examples_header = "Here are some labeled examples:";
  t.example_format = "Text: {text}\nSentiment: {label}";
  t.query_format = "Text: {text}\nSentiment:";
  t.answer_label = "Answer with the label only.";
  t.answer_confident = "Answer in the form \"<label> | confident: yes\" or \"<label> | confident: no\".";
  t.answer_score =
      "Answer in the form \"<label> | score: <number>\", where the number between 0 and 1 is your confidence in "
      "the label.";
  return t;
}

PromptTemplate PromptTemplate::from_json(const json& j) {
  const std::set<std::string> allowed = {"version",        "system",       "instruction",      "examples_header",
                                         "example_format", "query_format", "answer_label",     "answer_confident",
                                         "answer_score",   "max_prompt_chars"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw LlmError(LlmErrorCode::Config, "unknown template key '" + key + "'");
  }
  try {
    PromptTemplate t;
    t.version = j.at("version").get<std::string>();
    t.system = j.at("system").get<std::string>();
    t.instruction = j.at("instruction").get<std::string>();
    t.examples_header = j.at("examples_header").get<std::string>();
    t.example_format = j.at("example_format").get<std::string>();
    t.query_format = j.at("query_format").get<std::string>();
    t.answer_label = j.at("answer_label").get<std::string>();
    t.answer_confident = j.at("answer_confident").get<std::string>();
    t.answer_score = j.at("answer_score").get<std::string>();
    t.max_prompt_chars = j.value("max_prompt_chars", t.max_prompt_chars);
    if (t.instruction.find("{labels}") == std::string::npos) {
      throw LlmError(LlmErrorCode::Config, "template instruction must contain {labels}");
    }
    return t;
  } catch (const json::exception& e) {
    throw LlmError(LlmErrorCode::Config, std::string("malformed prompt template: ") + e.what());
  }
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open prompt template '" + path.string() + "'");
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw LlmError(LlmErrorCode::Config, path.string() + ": " + e.what());
  }
}

json PromptTemplate::to_json() const {
  return {{"version", version},
          {"system", system},
          {"instruction", instruction},
          {"examples_header", examples_header},
          {"example_format", example_format},
          {"query_format", query_format},
          {"answer_label", answer_label},
          {"answer_confident", answer_confident},
          {"answer_score", answer_score},
          {"max_prompt_chars", max_prompt_chars}};
}

std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl, const std::vector<std::string>& class_names,
                                       std::string_view text, const std::vector<FewShotExample>& examples,
                                       LlmMode mode) {
  std::string labels;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (c) labels += ", ";
    labels += class_names[c];
  }
  std::string user = replace_all(tmpl.instruction, "{labels}", labels);
  if (!examples.empty()) {
    user += "\n\n" + tmpl.examples_header;
    for (const auto& ex : examples) {
      user += "\n\n" + replace_all(replace_all(tmpl.example_format, "{label}", class_names.at(ex.label)), "{text}",
                                   ex.text);
    }
  }
  user += "\n\n";
  switch (mode) {
    case LlmMode::Sub:
    case LlmMode::Obj: user += tmpl.answer_label; break;
    case LlmMode::ObjConf: user += tmpl.answer_confident; break;
    case LlmMode::ObjConfScore: user += tmpl.answer_score; break;
  }
  // Text goes last so placeholders inside it are never expanded.
  user += "\n\n" + replace_all(tmpl.query_format, "{text}", text);
  if (user.size() > tmpl.max_prompt_chars) {
    throw LlmError(LlmErrorCode::PromptTooLong, "prompt of " + std::to_string(user.size()) +
                                                    " characters exceeds the limit of " +
                                                    std::to_string(tmpl.max_prompt_chars));
  }
  return {{"system", tmpl.system}, {"user", std::move(user)}};
}

std::vector<FewShotExample> select_few_shot(const Dataset& labeled, std::size_t n_shot, std::uint64_t seed) {
  if (n_shot == 0) return {};
  const auto sample = sample_n_shot(labeled, n_shot, seed);
  std::vector<std::vector<const Instance*>> by_class(labeled.num_classes());
  for (const auto& inst : sample.labeled.instances) by_class[*inst.gold_label].push_back(&inst);
  Rng rng(derive_seed(seed, "few-shot-order"));
  for (auto& members : by_class) rng.shuffle(members);
  std::vector<FewShotExample> out;
  for (std::size_t i = 0; i < n_shot; ++i) {
    for (std::size_t c = 0; c < by_class.size(); ++c) out.push_back({by_class[c][i]->text, c});
  }
  return out;
}

ParsedAnswer parse_answer(std::string_view response, const std::vector<std::string>& class_names, LlmMode mode) {
  const std::string text = lower(response);
  const std::string head = text.substr(0, text.find('|'));
  std::vector<ClassIndex> matched;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (contains_word(head, lower(class_names[c]))) matched.push_back(c);
  }
  if (matched.empty()) {
    throw LlmError(LlmErrorCode::Parse, "no class name in response: \"" + std::string(response) + "\"");
  }
  if (matched.size() > 1) {
    throw LlmError(LlmErrorCode::Parse, "ambiguous response names several classes: \"" + std::string(response) + "\"");
  }
  ParsedAnswer out;
  out.label = matched.front();
  if (mode == LlmMode::ObjConf) {
    static const std::regex re(R"(confiden(?:t|ce)\s*[:=]?\s*(yes|no|true|false)\b)");
    std::smatch m;
    if (!std::regex_search(text, m, re)) {
      throw LlmError(LlmErrorCode::Parse, "no confidence flag in response: \"" + std::string(response) + "\"");
    }
    out.confident = m[1] == "yes" || m[1] == "true";
  } else if (mode == LlmMode::ObjConfScore) {
    static const std::regex re(R"(score\s*[:=]?\s*(-?(?:\d+\.?\d*|\.\d+)(?:e[-+]?\d+)?))");
    std::smatch m;
    if (!std::regex_search(text, m, re)) {
      throw LlmError(LlmErrorCode::Parse, "no confidence score in response: \"" + std::string(response) + "\"");
    }
    const double score = std::stod(m[1]);
    if (!(score >= 0.0 && score <= 1.0)) {
      throw LlmError(LlmErrorCode::Parse, "confidence score " + m[1].str() + " outside [0, 1]");
    }
    out.score = score;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines

json to_json(const LlmLabelRecord& r, const std::vector<std::string>& class_names) {
  json j = {{"id", r.instance_id}, {"raw_response", r.raw_response}};
  j["label"] = r.label ? json(class_names.at(*r.label)) : json(nullptr);
  if (r.confident) j["confident"] = *r.confident;
  if (r.score) j["score"] = *r.score;
  if (r.error_code) {
    j["error"] = {{"kind", to_string(*r.error_code)}, {"message", r.error}};
  }
  return j;
}

ParsedAnswer llm_query(const LlmClient& client, const PromptTemplate& tmpl,
                       const std::vector<std::string>& class_names, std::string_view text,
                       const std::vector<FewShotExample>& examples, LlmMode mode, const LabelingOptions& options,
                       const std::string& instance_id) {
  ChatRequest request;
  request.model = options.model;
  request.temperature = options.temperature;
  request.instance_id = instance_id;
  request.messages = render_prompt(tmpl, class_names, text, examples, mode);
  return parse_answer(client.complete(request), class_names, mode);
}

ClassIndex llm_classify(const LlmClient& client, const PromptTemplate& tmpl,
                        const std::vector<std::string>& class_names, std::string_view text,
                        const std::vector<FewShotExample>& examples, std::size_t n_shot,
                        const LabelingOptions& options) {
  if (examples.size() != n_shot * class_names.size()) {
    throw InvalidArgument("expected " + std::to_string(n_shot * class_names.size()) + " few-shot examples, got " +
                          std::to_string(examples.size()));
  }
  return llm_query(client, tmpl, class_names, text, examples, LlmMode::Sub, options).label;
}

std::vector<LlmLabelRecord> llm_pseudo_label(const LlmClient& client, const PromptTemplate& tmpl,
                                             const Dataset& pool, LlmMode mode,
                                             const std::vector<FewShotExample>& examples, std::size_t n_shot,
                                             const LabelingOptions& options) {
  if (pool.instances.empty()) throw InvalidArgument("cannot label an empty pool");
  if (examples.size() != n_shot * pool.num_classes()) {
    throw InvalidArgument("expected " + std::to_string(n_shot * pool.num_classes()) + " few-shot examples, got " +
                          std::to_string(examples.size()));
  }
  if (options.max_in_flight == 0) throw InvalidArgument("max_in_flight must be >= 1");

  const std::size_t n = pool.size();
  std::vector<LlmLabelRecord> records(n);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& inst = pool.instances[i];
      auto& rec = records[i];
      rec.instance_id = inst.id;
      ChatRequest request;
      request.model = options.model;
      request.temperature = options.temperature;
      request.instance_id = inst.id;
      try {
        request.messages = render_prompt(tmpl, pool.class_names, inst.text, examples, mode);
        rec.raw_response = client.complete(request);
        const auto parsed = parse_answer(rec.raw_response, pool.class_names, mode);
        rec.label = parsed.label;
        rec.confident = parsed.confident;
        rec.score = parsed.score;
      } catch (const LlmError& e) {
        rec.error_code = e.code();
        rec.error = e.what();
      }
    }
  };
  const std::size_t threads = std::min(options.max_in_flight, n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool_threads;
    for (std::size_t t = 0; t < threads; ++t) pool_threads.emplace_back(worker);
  }

  std::sort(records.begin(), records.end(),
            [](const LlmLabelRecord& a, const LlmLabelRecord& b) { return a.instance_id < b.instance_id; });
  const auto failures = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const LlmLabelRecord& r) { return !r.ok(); }));
  const double fraction = static_cast<double>(failures) / static_cast<double>(n);
  if (fraction > options.failure_limit) {
    throw LlmAborted(std::to_string(failures) + " of " + std::to_string(n) + " LLM requests failed (limit " +
                         std::to_string(options.failure_limit) + ")",
                     std::move(records));
  }
  return records;
}

std::vector<std::pair<std::string, ClassIndex>> filter_records(const std::vector<LlmLabelRecord>& records,
                                                               LlmMode mode, std::optional<double> threshold) {
  if (mode == LlmMode::ObjConfScore && !threshold) {
    throw InvalidArgument("obj-conf-score filtering requires a threshold");
  }
  if (mode != LlmMode::ObjConfScore && threshold) {
    throw InvalidArgument(std::string("mode ") + to_string(mode) + " takes no threshold");
  }
  std::vector<std::pair<std::string, ClassIndex>> kept;
  for (const auto& r : records) {
    if (!r.ok() || !r.label) continue;
    bool keep = true;
    if (mode == LlmMode::ObjConf) {
      if (!r.confident) {
        throw LlmError(LlmErrorCode::MissingField, "record '" + r.instance_id + "' lacks a confidence flag");
      }
      keep = *r.confident;
    } else if (mode == LlmMode::ObjConfScore) {
      if (!r.score) {
        throw LlmError(LlmErrorCode::MissingField, "record '" + r.instance_id + "' lacks a confidence score");
      }
      keep = *r.score > *threshold;
    }
    if (keep) kept.emplace_back(r.instance_id, *r.label);
  }
  return kept;
}

std::unique_ptr<TextClassifier> train_slm_on_pseudo_labels(
    const std::vector<std::pair<std::string, ClassIndex>>& filtered, const Dataset& pool,
    const Dataset& labeled_seed, const ClassifierFactory& make_classifier, const Dataset* validation) {
  if (filtered.empty() && labeled_seed.instances.empty()) {
    throw TrainingError("no training data: pseudo-labels and labeled seed are both empty");
  }
  std::vector<TrainRecord> train;
  std::set<std::string> gold_ids;
  for (const auto& inst : labeled_seed.instances) {
    if (!inst.gold_label) continue;
    gold_ids.insert(inst.id);
    train.push_back({inst.id, inst.text, TrainTarget::hard(*inst.gold_label)});
  }
  std::map<std::string, const Instance*> texts;
  for (const auto& inst : pool.instances) texts.emplace(inst.id, &inst);
  for (const auto& [id, label] : filtered) {
    if (gold_ids.count(id)) continue;
    const auto it = texts.find(id);
    if (it == texts.end()) throw InvalidArgument("pseudo-label for unknown instance '" + id + "'");
    train.push_back({id, it->second->text, TrainTarget::hard(label)});
  }
  std::vector<TrainRecord> val;
  if (validation) {
    for (const auto& inst : validation->instances) {
      if (inst.gold_label) val.push_back({inst.id, inst.text, TrainTarget::hard(*inst.gold_label)});
    }
  }
  auto model = make_classifier();
  model->fit(train, val);
  return model;
}

}  // namespace selftrain
