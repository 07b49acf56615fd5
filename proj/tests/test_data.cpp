#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "data.hpp"

using namespace selftrain;

namespace {

const std::vector<std::string> kClasses = {"positive", "negative", "neutral"};

Dataset labeled_corpus(std::size_t per_class) {
  Dataset d;
  d.class_names = kClasses;
  for (std::size_t i = 0; i < per_class * 3; ++i) {
    d.instances.push_back({"id" + std::to_string(1000 + i), "text number " + std::to_string(i), i % 3});
  }
  return d;
}

std::set<std::string> ids(const Dataset& d) {
  std::set<std::string> out;
  for (const auto& inst : d.instances) out.insert(inst.id);
  return out;
}

DataErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no DataError thrown";
  return DataErrorCode::InvalidSpec;
}

}  // namespace

TEST(LoadJsonl, MapsLabelByPosition) {
  std::istringstream in(R"({"id":"a","text":"great day","label":"positive"})");
  const auto d = read_jsonl(in, kClasses);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.instances[0].id, "a");
  EXPECT_EQ(d.instances[0].gold_label, 0u);
}

TEST(LoadJsonl, CaseMismatchIsUnknownLabel) {
  std::istringstream in(R"({"id":"a","text":"great day","label":"POSITIVE"})");
  EXPECT_EQ(code_of([&] { read_jsonl(in, kClasses); }), DataErrorCode::UnknownLabel);
}

TEST(LoadJsonl, MixedLabeledAndUnlabeled) {
  std::istringstream in(
      "{\"id\":\"a\",\"text\":\"one\",\"label\":\"positive\"}\n"
      "{\"id\":\"b\",\"text\":\"two\",\"label\":\"negative\"}\n"
      "{\"id\":\"c\",\"text\":\"three\"}\n"
      "{\"id\":\"d\",\"text\":\"four\",\"label\":\"neutral\"}\n"
      "{\"id\":\"e\",\"text\":\"five\"}\n");
  const auto d = read_jsonl(in, kClasses);
  ASSERT_EQ(d.size(), 5u);
  const auto unlabeled = std::count_if(d.instances.begin(), d.instances.end(),
                                       [](const Instance& i) { return !i.gold_label; });
  EXPECT_EQ(unlabeled, 2);
  EXPECT_EQ(d.instances[3].id, "d");
}

TEST(LoadJsonl, DuplicateIdRejected) {
  std::istringstream in("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
  EXPECT_EQ(code_of([&] { read_jsonl(in, kClasses); }), DataErrorCode::DuplicateId);
}

TEST(LoadJsonl, MalformedLineReportsLineNumber) {
  std::istringstream in("{\"id\":\"a\",\"text\":\"x\"}\n{not json\n");
  try {
    read_jsonl(in, kClasses, "f.jsonl");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.code(), DataErrorCode::Malformed);
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(LoadJsonl, MissingTextIsMalformed) {
  std::istringstream in("{\"id\":\"a\"}\n");
  EXPECT_EQ(code_of([&] { read_jsonl(in, kClasses); }), DataErrorCode::Malformed);
}

TEST(LoadJsonl, AutoAssignsRowIds) {
  std::istringstream in("{\"text\":\"x\"}\n{\"text\":\"y\"}\n");
  const auto d = read_jsonl(in, kClasses);
  EXPECT_EQ(d.instances[0].id, "row-0");
  EXPECT_EQ(d.instances[1].id, "row-1");
}

TEST(LoadCsv, QuotedFieldsAndRoundTrip) {
  std::istringstream in("id,text,label\n"
                        "a,\"hello, world\",positive\n"
                        "b,\"she said \"\"no\"\"\nthen left\",negative\n"
                        "c,plain,\n");
  const auto d = read_csv(in, kClasses);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.instances[0].text, "hello, world");
  EXPECT_EQ(d.instances[1].text, "she said \"no\"\nthen left");
  EXPECT_FALSE(d.instances[2].gold_label.has_value());

  std::ostringstream out;
  write_csv(out, d);
  std::istringstream again(out.str());
  EXPECT_EQ(read_csv(again, kClasses).instances, d.instances);
}

TEST(LoadCsv, HeaderRequired) {
  std::istringstream in("a,hello,positive\n");
  EXPECT_EQ(code_of([&] { read_csv(in, kClasses); }), DataErrorCode::Malformed);
}

TEST(JsonlRoundTrip, PreservesInstances) {
  const auto d = labeled_corpus(4);
  std::ostringstream out;
  write_jsonl(out, d);
  std::istringstream in(out.str());
  EXPECT_EQ(read_jsonl(in, kClasses).instances, d.instances);
}

TEST(Split, EightyTwentyAndDeterministic) {
  const auto d = labeled_corpus(34);  // 102 instances
  Dataset hundred = d;
  hundred.instances.resize(100);
  const auto a = split_train_test(hundred, {0.2, 7});
  const auto b = split_train_test(hundred, {0.2, 7});
  EXPECT_EQ(a.train.size(), 80u);
  EXPECT_EQ(a.test.size(), 20u);
  EXPECT_EQ(a.test.instances, b.test.instances);
  EXPECT_EQ(a.train.instances, b.train.instances);
}

TEST(Split, SeedsDiffer) {
  auto d = labeled_corpus(34);
  d.instances.resize(100);
  EXPECT_NE(ids(split_train_test(d, {0.2, 7}).test), ids(split_train_test(d, {0.2, 8}).test));
}

TEST(Split, RoundsHalfUp) {
  auto d = labeled_corpus(2);
  d.instances.resize(4);
  EXPECT_EQ(split_train_test(d, {0.2, 1}).test.size(), 1u);  // 0.8 -> 1
  d = labeled_corpus(2);
  d.instances.resize(5);
  EXPECT_EQ(split_train_test(d, {0.5, 1}).test.size(), 3u);  // 2.5 -> 3
}

TEST(Split, ExactPartitionPreservingOrder) {
  const auto d = labeled_corpus(20);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = split_train_test(d, {0.3, seed});
    auto all = ids(s.train);
    for (const auto& id : ids(s.test)) EXPECT_TRUE(all.insert(id).second) << "overlap " << id;
    EXPECT_EQ(all, ids(d));
    for (const auto* side : {&s.train, &s.test}) {
      EXPECT_TRUE(std::is_sorted(side->instances.begin(), side->instances.end(),
                                 [](const Instance& a, const Instance& b) { return a.id < b.id; }));
    }
  }
}

TEST(Split, TooSmallAndUnlabeledRejected) {
  auto d = labeled_corpus(1);
  d.instances.resize(1);
  EXPECT_EQ(code_of([&] { split_train_test(d, {0.2, 0}); }), DataErrorCode::TooSmall);
  auto u = labeled_corpus(3);
  u.instances[2].gold_label.reset();
  EXPECT_EQ(code_of([&] { split_train_test(u, {0.2, 0}); }), DataErrorCode::MissingLabel);
}

TEST(NShot, SizesAndCounts) {
  const auto d = labeled_corpus(40);
  const auto s = sample_n_shot(d, 5, 3);
  EXPECT_EQ(s.labeled.size(), 15u);
  EXPECT_EQ(s.labeled.class_counts(), (std::vector<std::size_t>{5, 5, 5}));
}

TEST(NShot, InsufficientClassCount) {
  auto d = labeled_corpus(10);
  int negatives = 0;
  for (auto& inst : d.instances) {
    if (inst.gold_label == 1u && ++negatives > 3) inst.gold_label = 0;
  }
  EXPECT_EQ(code_of([&] { sample_n_shot(d, 5, 0); }), DataErrorCode::InsufficientClassCount);
}

TEST(NShot, DeterministicPartitionWithShadowGold) {
  const auto d = labeled_corpus(334);  // ~1000 instances
  const auto a = sample_n_shot(d, 20, 11);
  const auto b = sample_n_shot(d, 20, 11);
  EXPECT_EQ(a.labeled.size(), 60u);
  EXPECT_EQ(ids(a.labeled), ids(b.labeled));
  EXPECT_NE(ids(a.labeled), ids(sample_n_shot(d, 20, 12).labeled));

  auto all = ids(a.labeled);
  for (const auto& inst : a.pool.instances) {
    EXPECT_TRUE(all.insert(inst.id).second);
    EXPECT_FALSE(inst.gold_label.has_value());
    EXPECT_TRUE(a.shadow_gold.find(inst.id).has_value());
  }
  EXPECT_EQ(all, ids(d));
  EXPECT_EQ(a.shadow_gold.size(), a.pool.size());
}

TEST(Priors, LdcDistribution) {
  const auto p = ldc_priors();
  ASSERT_EQ(p.size(), 3u);
  const double total = 5658.0 + 2578.0 + 10106.0;
  EXPECT_NEAR(p[0], 5658.0 / total, 1e-15);
  EXPECT_NEAR(p[1], 2578.0 / total, 1e-15);
  EXPECT_NEAR(p[2], 10106.0 / total, 1e-15);
}

TEST(Synth, CountsAndDeterminism) {
  SynthSpec spec;
  spec.vocab_per_class = make_vocabulary(3, 50, 4);
  spec.n_per_class = 100;
  spec.seed = 9;
  const auto a = synth_generate(spec);
  EXPECT_EQ(a.size(), 300u);
  // Default priors for three classes follow the LDC shape.
  const auto counts = a.class_counts();
  EXPECT_GT(counts[2], counts[0]);
  EXPECT_GT(counts[0], counts[1]);

  std::ostringstream x, y;
  write_jsonl(x, a);
  write_jsonl(y, synth_generate(spec));
  EXPECT_EQ(x.str(), y.str());
}

TEST(Synth, NoiseFreeTextsUseOnlyOwnVocabulary) {
  SynthSpec spec;
  spec.vocab_per_class = make_vocabulary(3, 40, 2);
  spec.priors = {1, 1, 1};
  spec.n_per_class = 30;
  const auto d = synth_generate(spec);
  std::vector<std::set<std::string>> vocab;
  for (const auto& v : spec.vocab_per_class) vocab.emplace_back(v.begin(), v.end());
  for (const auto& inst : d.instances) {
    std::istringstream words(inst.text);
    std::string w;
    std::size_t n = 0;
    while (words >> w) {
      ++n;
      EXPECT_TRUE(vocab[*inst.gold_label].count(w)) << w;
    }
    EXPECT_GE(n, 5u);
    EXPECT_LE(n, 15u);
  }
}

TEST(Synth, VocabulariesDisjoint) {
  const auto v = make_vocabulary(3, 200, 5);
  std::set<std::string> all;
  for (const auto& words : v) {
    EXPECT_EQ(words.size(), 200u);
    for (const auto& w : words) EXPECT_TRUE(all.insert(w).second) << w;
  }
}

TEST(Synth, EmptyVocabularyRejected) {
  SynthSpec spec;
  spec.vocab_per_class = {{"a"}, {}, {"c"}};
  EXPECT_EQ(code_of([&] { synth_generate(spec); }), DataErrorCode::EmptyVocabulary);
}
