#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "engine.hpp"
#include "llm.hpp"
#include "oracles.hpp"

using namespace selftrain;
namespace fs = std::filesystem;
using std::chrono::milliseconds;

namespace {

const std::vector<std::string> kClasses = {"positive", "negative", "neutral"};

LlmErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const LlmError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no LlmError thrown";
  return LlmErrorCode::Config;
}

std::shared_ptr<MockTransport> mock_from(const std::string& jsonl) {
  std::istringstream in(jsonl);
  return MockTransport::from_jsonl(in);
}

ChatRequest request_for(const std::string& id, const std::string& text = "some text") {
  ChatRequest r;
  r.instance_id = id;
  r.messages = render_prompt(PromptTemplate::builtin(), kClasses, text, {}, LlmMode::Obj);
  return r;
}

Dataset small_pool(std::size_t n) {
  Dataset d;
  d.class_names = kClasses;
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "p%03zu", i);
    d.instances.push_back({id, "text " + std::to_string(i), std::nullopt});
  }
  return d;
}

struct Recorder {
  std::vector<milliseconds> delays;
  Sleeper sleeper() {
    return [this](milliseconds d) { delays.push_back(d); };
  }
};

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(Parser, PhrasingCorpusResolvesUniquely) {
  const std::vector<std::pair<std::string, ClassIndex>> corpus = {
      {"positive", 0},
      {"Negative", 1},
      {"NEUTRAL", 2},
      {"The sentiment is Negative.", 1},
      {"Sentiment: positive", 0},
      {"I would say this is neutral.", 2},
      {"  positive  \n", 0},
      {"Answer: negative!", 1},
      {"\"neutral\"", 2},
      {"This text expresses a positive sentiment.", 0},
      {"Label - negative", 1},
      {"The overall tone seems neutral to me", 2},
      {"positive | confident: yes", 0},
      {"negative | score: 0.3", 1},
      {"It's clearly POSITIVE", 0},
      {"(negative)", 1},
      {"neutral.", 2},
      {"Sentiment = positive", 0},
      {"My answer is: Negative", 1},
      {"neutral, as the text states facts", 2},
  };
  ASSERT_EQ(corpus.size(), 20u);
  for (const auto& [text, label] : corpus) {
    EXPECT_EQ(parse_answer(text, kClasses, LlmMode::Sub).label, label) << text;
  }
}

TEST(Parser, AmbiguousOrMissingClassIsAParseError) {
  EXPECT_EQ(code_of([] { parse_answer("positive or negative", kClasses, LlmMode::Sub); }), LlmErrorCode::Parse);
  EXPECT_EQ(code_of([] { parse_answer("I cannot tell", kClasses, LlmMode::Sub); }), LlmErrorCode::Parse);
  // Whole words only.
  EXPECT_EQ(code_of([] { parse_answer("positively", kClasses, LlmMode::Sub); }), LlmErrorCode::Parse);
}

TEST(Parser, ClassNamesAfterTheSeparatorAreIgnored) {
  EXPECT_EQ(parse_answer("negative | confident: yes, not positive", kClasses, LlmMode::ObjConf).label, 1u);
}

TEST(Parser, ConfidenceFlag) {
  const auto yes = parse_answer("positive | confident: yes", kClasses, LlmMode::ObjConf);
  EXPECT_EQ(yes.confident, true);
  EXPECT_EQ(parse_answer("neutral | Confident: No", kClasses, LlmMode::ObjConf).confident, false);
  EXPECT_EQ(parse_answer("neutral | confidence = true", kClasses, LlmMode::ObjConf).confident, true);
  EXPECT_EQ(code_of([] { parse_answer("neutral", kClasses, LlmMode::ObjConf); }), LlmErrorCode::Parse);
}

TEST(Parser, ScoreRange) {
  EXPECT_DOUBLE_EQ(*parse_answer("positive | score: 0.85", kClasses, LlmMode::ObjConfScore).score, 0.85);
  EXPECT_DOUBLE_EQ(*parse_answer("negative | Score=1", kClasses, LlmMode::ObjConfScore).score, 1.0);
  EXPECT_DOUBLE_EQ(*parse_answer("negative | score: .5", kClasses, LlmMode::ObjConfScore).score, 0.5);
  EXPECT_EQ(code_of([] { parse_answer("negative | score: 1.5", kClasses, LlmMode::ObjConfScore); }),
            LlmErrorCode::Parse);
  EXPECT_EQ(code_of([] { parse_answer("negative | score: -0.1", kClasses, LlmMode::ObjConfScore); }),
            LlmErrorCode::Parse);
  EXPECT_EQ(code_of([] { parse_answer("negative", kClasses, LlmMode::ObjConfScore); }), LlmErrorCode::Parse);
}

TEST(Prompt, ClassNamesListedOnceAndTextLast) {
  const auto msgs = render_prompt(PromptTemplate::builtin(), kClasses, "the {labels} stay literal", {}, LlmMode::Sub);
  ASSERT_EQ(msgs.size(), 2u);
  EXPECT_EQ(msgs[0].role, "system");
  const auto& user = msgs[1].content;
  for (const auto& c : kClasses) EXPECT_EQ(count_of(user, c), 1u) << c;
  const std::string tail = "Text: the {labels} stay literal\nSentiment:";
  ASSERT_GE(user.size(), tail.size());
  EXPECT_EQ(user.substr(user.size() - tail.size()), tail);
}

TEST(Prompt, AnswerDirectiveFollowsMode) {
  const auto t = PromptTemplate::builtin();
  EXPECT_NE(render_prompt(t, kClasses, "x", {}, LlmMode::ObjConf)[1].content.find("confident"), std::string::npos);
  EXPECT_NE(render_prompt(t, kClasses, "x", {}, LlmMode::ObjConfScore)[1].content.find("score"), std::string::npos);
  EXPECT_EQ(render_prompt(t, kClasses, "x", {}, LlmMode::Obj)[1].content.find("score"), std::string::npos);
}

TEST(Prompt, TooLongIsRejected) {
  auto t = PromptTemplate::builtin();
  t.max_prompt_chars = 200;
  EXPECT_EQ(code_of([&] { render_prompt(t, kClasses, std::string(300, 'a'), {}, LlmMode::Sub); }),
            LlmErrorCode::PromptTooLong);
}

TEST(Prompt, TemplateJsonRoundTrip) {
  const auto t = PromptTemplate::builtin();
  EXPECT_EQ(PromptTemplate::from_json(t.to_json()).to_json(), t.to_json());
  auto j = t.to_json();
  j["extra"] = 1;
  EXPECT_EQ(code_of([&] { PromptTemplate::from_json(j); }), LlmErrorCode::Config);
}

TEST(FewShot, ClassInterleavedAndSeeded) {
  const auto corpus = oracle::synth_corpus(1, 0.0, 20, 0);
  const auto a = select_few_shot(corpus.train, 3, 5);
  ASSERT_EQ(a.size(), 9u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].label, i % 3);
  const auto b = select_few_shot(corpus.train, 3, 5);
  const auto c = select_few_shot(corpus.train, 3, 6);
  std::vector<std::string> ta, tb, tc;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ta.push_back(a[i].text);
    tb.push_back(b[i].text);
    tc.push_back(c[i].text);
  }
  EXPECT_EQ(ta, tb);
  EXPECT_NE(ta, tc);
  EXPECT_TRUE(select_few_shot(corpus.train, 0, 5).empty());
}

TEST(Mock, SequenceReplayAndMiss) {
  auto mock = mock_from(
      R"({"match":{"mode":"sequence"},"response":"positive"})"
      "\n"
      R"({"match":{"mode":"sequence"},"response":"negative"})"
      "\n"
      R"({"match":{"mode":"sequence"},"response":"neutral"})"
      "\n");
  LlmClient client(mock, RetryPolicy{}, [](milliseconds) {});
  EXPECT_EQ(client.complete(request_for("a")), "positive");
  EXPECT_EQ(client.complete(request_for("b")), "negative");
  EXPECT_EQ(client.complete(request_for("c")), "neutral");
  EXPECT_EQ(code_of([&] { client.complete(request_for("d")); }), LlmErrorCode::FixtureMiss);
}

TEST(Mock, ByIdTakesPrecedence) {
  auto mock = mock_from(
      R"({"match":{"mode":"sequence"},"response":"neutral"})"
      "\n"
      R"({"match":{"mode":"by_id","key":"x"},"response":"negative"})"
      "\n");
  LlmClient client(mock, RetryPolicy{}, [](milliseconds) {});
  EXPECT_EQ(client.complete(request_for("x")), "negative");
  EXPECT_EQ(client.complete(request_for("x")), "negative");
  EXPECT_EQ(client.complete(request_for("y")), "neutral");
}

TEST(Mock, MalformedFixtures) {
  EXPECT_EQ(code_of([] { mock_from("{not json\n"); }), LlmErrorCode::MalformedFixture);
  EXPECT_EQ(code_of([] { mock_from(R"({"match":{"mode":"sequence"}})" "\n"); }), LlmErrorCode::MalformedFixture);
  EXPECT_EQ(code_of([] {
              mock_from(R"({"match":{"mode":"by_id","key":"a"},"response":"x"})"
                        "\n"
                        R"({"match":{"mode":"by_id","key":"a"},"response":"y"})"
                        "\n");
            }),
            LlmErrorCode::MalformedFixture);
}

TEST(Retry, TwoFailuresThenSuccessWithinThreeRetries) {
  auto mock = mock_from(R"({"match":{"mode":"by_id","key":"a"},"response":"positive","failures_before_success":2})"
                        "\n");
  Recorder rec;
  RetryPolicy policy;
  policy.max_retries = 3;
  policy.seed = 77;
  LlmClient client(mock, policy, rec.sleeper());
  EXPECT_EQ(client.complete(request_for("a")), "positive");
  EXPECT_EQ(client.retries(), 2u);
  EXPECT_EQ(mock->attempts(), 3u);
  ASSERT_EQ(rec.delays.size(), 2u);
  EXPECT_EQ(rec.delays[0], policy.delay("a", 0));
  EXPECT_EQ(rec.delays[1], policy.delay("a", 1));
}

TEST(Retry, GivesUpAfterMaxRetries) {
  auto mock = mock_from(R"({"match":{"mode":"by_id","key":"a"},"response":"positive","failures_before_success":4})"
                        "\n");
  Recorder rec;
  RetryPolicy policy;
  policy.max_retries = 3;
  LlmClient client(mock, policy, rec.sleeper());
  EXPECT_EQ(code_of([&] { client.complete(request_for("a")); }), LlmErrorCode::Transport);
  EXPECT_EQ(mock->attempts(), 4u);
  EXPECT_EQ(rec.delays.size(), 3u);
}

TEST(Retry, BackoffIsBoundedAndDeterministic) {
  RetryPolicy p;
  p.base_delay = milliseconds(100);
  p.max_delay = milliseconds(1000);
  p.seed = 3;
  for (std::size_t r = 0; r < 8; ++r) {
    const auto cap = std::min<long long>(1000, 100LL << r);
    const auto d = p.delay("id", r).count();
    EXPECT_GE(d, cap / 2);
    EXPECT_LT(d, cap);
    EXPECT_EQ(p.delay("id", r), p.delay("id", r));
  }
  RetryPolicy q = p;
  q.seed = 4;
  bool differs = false;
  for (std::size_t r = 0; r < 8; ++r) differs |= p.delay("id", r) != q.delay("id", r);
  EXPECT_TRUE(differs);
}

TEST(PseudoLabel, ReplaysScriptInIdOrder) {
  const auto pool = small_pool(10);
  std::string fixture;
  std::vector<ClassIndex> script;
  for (std::size_t i = 0; i < 10; ++i) {
    script.push_back((i * 7) % 3);
    fixture += nlohmann::json{{"match", {{"mode", "by_id"}, {"key", pool.instances[i].id}}},
                              {"response", kClasses[script.back()]}}
                   .dump() +
               "\n";
  }
  LlmClient client(mock_from(fixture), RetryPolicy{}, [](milliseconds) {});
  const auto records = llm_pseudo_label(client, PromptTemplate::builtin(), pool, LlmMode::Obj, {}, 0);
  ASSERT_EQ(records.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(records[i].instance_id, pool.instances[i].id);
    EXPECT_EQ(records[i].label, script[i]);
    EXPECT_FALSE(records[i].confident.has_value());
    EXPECT_FALSE(records[i].score.has_value());
  }
}

TEST(PseudoLabel, FailuresBelowLimitBecomeMarkers) {
  const auto pool = small_pool(100);
  const fs::path dir = fs::temp_directory_path() / "selftrain_llm_test";
  fs::create_directories(dir);
  std::vector<std::size_t> labels(100), failures(100, 0);
  std::vector<double> scores(100);
  std::size_t expected_retries = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    labels[i] = i % 3;
    scores[i] = 0.01 * static_cast<double>(i);
    if (i % 20 == 7) failures[i] = 50;  // never succeeds
    else if (i % 9 == 0) failures[i] = 1;  // recovers on retry
    expected_retries += std::min<std::size_t>(failures[i], 3);
  }
  oracle::write_fixture(dir / "f.jsonl", pool, labels, scores, failures);
  Recorder rec;
  RetryPolicy policy;
  policy.max_retries = 3;
  auto client = mock_client(dir / "f.jsonl", policy, rec.sleeper());
  LabelingOptions opts;
  opts.max_in_flight = 8;
  const auto records = llm_pseudo_label(*client, PromptTemplate::builtin(), pool, LlmMode::ObjConfScore, {}, 0, opts);
  ASSERT_EQ(records.size(), 100u);
  std::size_t ok = 0;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& r = records[i];
    EXPECT_EQ(r.instance_id, pool.instances[i].id);
    ids.insert(r.instance_id);
    if (r.ok()) {
      ++ok;
      EXPECT_EQ(r.label, labels[i]);
      EXPECT_NEAR(*r.score, scores[i], 1e-9);
    } else {
      EXPECT_EQ(i % 20, 7u);
      EXPECT_EQ(r.error_code, LlmErrorCode::Transport);
      EXPECT_FALSE(r.label.has_value());
    }
  }
  EXPECT_EQ(ok, 95u);
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_EQ(client->retries(), expected_retries);
}

TEST(PseudoLabel, AbortsAboveLimitAndKeepsRecords) {
  const auto pool = small_pool(20);
  std::string fixture;
  for (std::size_t i = 0; i < 20; ++i) {
    fixture += nlohmann::json{{"match", {{"mode", "by_id"}, {"key", pool.instances[i].id}}},
                              {"response", i < 3 ? "no idea" : "neutral"}}
                   .dump() +
               "\n";
  }
  LlmClient client(mock_from(fixture), RetryPolicy{}, [](milliseconds) {});
  try {
    llm_pseudo_label(client, PromptTemplate::builtin(), pool, LlmMode::Obj, {}, 0);
    FAIL();
  } catch (const LlmAborted& e) {
    EXPECT_EQ(e.code(), LlmErrorCode::Aborted);
    ASSERT_EQ(e.records().size(), 20u);
    EXPECT_EQ(e.records()[0].error_code, LlmErrorCode::Parse);
    EXPECT_TRUE(e.records()[5].ok());
  }
}

TEST(Classify, ExampleCountMustMatch) {
  LlmClient client(mock_from(R"({"match":{"mode":"sequence"},"response":"positive"})" "\n"), RetryPolicy{},
                   [](milliseconds) {});
  const std::vector<FewShotExample> two = {{"a", 0}, {"b", 1}};
  EXPECT_THROW(llm_classify(client, PromptTemplate::builtin(), kClasses, "x", two, 1), InvalidArgument);
  EXPECT_EQ(llm_classify(client, PromptTemplate::builtin(), kClasses, "x", {}, 0), 0u);
}

TEST(Filter, ScoreThresholdIsStrict) {
  std::vector<LlmLabelRecord> recs(3);
  const double scores[] = {0.85, 0.8, 0.5};
  for (int i = 0; i < 3; ++i) {
    recs[i].instance_id = "r" + std::to_string(i);
    recs[i].label = 0;
    recs[i].score = scores[i];
  }
  const auto kept = filter_records(recs, LlmMode::ObjConfScore, 0.8);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].first, "r0");
  EXPECT_EQ(filter_records(recs, LlmMode::ObjConfScore, 0.0).size(), 3u);
  EXPECT_TRUE(filter_records(recs, LlmMode::ObjConfScore, 1.0).empty());
  EXPECT_THROW(filter_records(recs, LlmMode::ObjConfScore), InvalidArgument);
  EXPECT_THROW(filter_records(recs, LlmMode::Obj, 0.5), InvalidArgument);
}

TEST(Filter, ConfidentFlagsAndFailures) {
  std::vector<LlmLabelRecord> recs(4);
  const bool flags[] = {true, false, true, true};
  for (int i = 0; i < 4; ++i) {
    recs[i].instance_id = "r" + std::to_string(i);
    recs[i].label = 1;
    recs[i].confident = flags[i];
  }
  recs[3].error_code = LlmErrorCode::Parse;
  recs[3].label.reset();
  EXPECT_EQ(filter_records(recs, LlmMode::ObjConf).size(), 2u);
  EXPECT_EQ(filter_records(recs, LlmMode::Obj).size(), 3u);
  recs[0].confident.reset();
  EXPECT_EQ(code_of([&] { filter_records(recs, LlmMode::ObjConf); }), LlmErrorCode::MissingField);
}

TEST(Filter, MonotoneInThreshold) {
  std::mt19937_64 gen(12);
  std::vector<LlmLabelRecord> recs(300);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].instance_id = "r" + std::to_string(i);
    recs[i].label = gen() % 3;
    recs[i].score = static_cast<double>(gen() % 101) / 100.0;
  }
  std::size_t previous = recs.size() + 1;
  for (int k = 0; k <= 20; ++k) {
    const double t = k / 20.0;
    const auto kept = filter_records(recs, LlmMode::ObjConfScore, t);
    std::size_t brute = 0;
    for (const auto& r : recs) brute += *r.score > t;
    EXPECT_EQ(kept.size(), brute);
    EXPECT_LE(kept.size(), previous);
    previous = kept.size();
  }
}

TEST(SlmTraining, EmptyFilterEqualsSupervisedBaseline) {
  const auto corpus = oracle::synth_corpus(2, 0.1, 40, 0);
  const auto s = sample_n_shot(corpus.train, 5, 2);
  BaselineConfig b;
  b.num_classes = 3;
  EngineConfig e;
  e.make_classifier = baseline_factory(b);
  const auto slm = train_slm_on_pseudo_labels({}, s.pool, s.labeled, e.make_classifier);
  EXPECT_EQ(slm->serialize(), run_supervised(s.labeled, e)->serialize());
}

TEST(SlmTraining, CleanLabelsBeatHalfWrongLabels) {
  const auto corpus = oracle::synth_corpus(3, 0.1, 220, 100);
  const auto s = sample_n_shot(corpus.train, 5, 3);
  BaselineConfig b;
  b.num_classes = 3;
  const auto factory = baseline_factory(b);
  std::vector<std::pair<std::string, ClassIndex>> clean, noisy;
  std::size_t i = 0;
  for (const auto& inst : s.pool.instances) {
    const auto gold = *s.shadow_gold.find(inst.id);
    clean.emplace_back(inst.id, gold);
    noisy.emplace_back(inst.id, i++ % 2 ? (gold + 1) % 3 : gold);
  }
  EXPECT_NEAR(labeling_accuracy(noisy, s.shadow_gold), 0.5, 0.01);
  const auto good = evaluate(*train_slm_on_pseudo_labels(clean, s.pool, s.labeled, factory), corpus.test);
  const auto bad = evaluate(*train_slm_on_pseudo_labels(noisy, s.pool, s.labeled, factory), corpus.test);
  EXPECT_GE(good.accuracy, 0.95);
  EXPECT_GT(good.macro_f1, bad.macro_f1);
}

TEST(Http, PostsChatRequestWithBearerToken) {
  httplib::Server server;
  std::string seen_auth, seen_body;
  int calls = 0;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    seen_auth = req.get_header_value("Authorization");
    seen_body = req.body;
    if (req.body.find("fail-500") != std::string::npos) {
      res.status = 500;
      return;
    }
    if (req.body.find("fail-400") != std::string::npos) {
      res.status = 400;
      return;
    }
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"neutral | score: 0.7"}}]})",
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("SELFTRAIN_TEST_TOKEN", "sekret", 1);
  LlmClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "test-model";
  cfg.auth_env = "SELFTRAIN_TEST_TOKEN";
  cfg.timeout = milliseconds(5000);
  HttpTransport transport(cfg);

  ChatRequest req = request_for("id-1", "hello");
  req.model = cfg.model;
  EXPECT_EQ(transport.send(req), "neutral | score: 0.7");
  EXPECT_EQ(seen_auth, "Bearer sekret");
  const auto body = nlohmann::json::parse(seen_body);
  EXPECT_EQ(body.at("model"), "test-model");
  EXPECT_EQ(body.at("messages").size(), 2u);
  EXPECT_FALSE(body.contains("instance_id"));

  try {
    transport.send(request_for("x", "fail-500"));
    ADD_FAILURE();
  } catch (const LlmError& e) {
    EXPECT_TRUE(e.retryable());
  }
  try {
    transport.send(request_for("x", "fail-400"));
    ADD_FAILURE();
  } catch (const LlmError& e) {
    EXPECT_FALSE(e.retryable());
  }
  server.stop();
  t.join();
  EXPECT_EQ(calls, 3);
}

TEST(Http, BadEndpointIsAConfigError) {
  LlmClientConfig cfg;
  cfg.endpoint = "ftp://example.com/x";
  cfg.model = "m";
  EXPECT_EQ(code_of([&] { HttpTransport t(cfg); }), LlmErrorCode::Config);
}
