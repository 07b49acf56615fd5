#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "metrics.hpp"
#include "oracles.hpp"

using namespace selftrain;

namespace {

const std::vector<std::string> kNames = {"positive", "negative", "neutral"};

std::vector<std::vector<std::size_t>> rows_of(const ConfusionMatrix& cm) {
  std::vector<std::vector<std::size_t>> m(cm.num_classes(), std::vector<std::size_t>(cm.num_classes()));
  for (std::size_t g = 0; g < cm.num_classes(); ++g) {
    for (std::size_t p = 0; p < cm.num_classes(); ++p) m[g][p] = cm.at(g, p);
  }
  return m;
}

}  // namespace

TEST(Confusion, DiagonalAndSwapped) {
  const std::vector<ClassIndex> g{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  const auto cm = confusion(g, g, 3);
  EXPECT_EQ(cm.trace(), 10u);
  EXPECT_EQ(cm.total(), 10u);
  const std::vector<ClassIndex> a{0, 1}, b{1, 0};
  EXPECT_EQ(confusion(a, b, 2).trace(), 0u);
}

TEST(Confusion, MatchesRecount) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ClassIndex> g(200), p(200);
    for (auto& v : g) v = gen() % 3;
    for (auto& v : p) v = gen() % 3;
    EXPECT_EQ(rows_of(confusion(g, p, 3)), oracle::recount(g, p, 3));
  }
}

TEST(Confusion, LengthMismatchRejected) {
  const std::vector<ClassIndex> a{0, 1}, b{1};
  EXPECT_THROW(confusion(a, b, 2), InvalidArgument);
}

TEST(MacroF1, PerfectAndOneClassPredictor) {
  const std::vector<ClassIndex> g{0, 1, 2};
  EXPECT_EQ(macro_f1(confusion(g, g, 3)), 1.0);
  std::vector<ClassIndex> gold, pred;
  for (int i = 0; i < 30; ++i) {
    gold.push_back(static_cast<ClassIndex>(i % 3));
    pred.push_back(0);
  }
  const auto cm = confusion(gold, pred, 3);
  EXPECT_NEAR(macro_f1(cm), 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(accuracy(cm), 1.0 / 3.0, 1e-15);
  const auto r = make_report(cm, kNames);
  EXPECT_NEAR(r.per_class[0].f1, 0.5, 1e-15);
  EXPECT_NE(std::find(r.flags.begin(), r.flags.end(), "precision_undefined:negative"), r.flags.end());
}

TEST(MacroF1, HandWorkedMatrix) {
  const auto cm = ConfusionMatrix::from_counts({{8, 2, 0}, {1, 9, 0}, {0, 0, 10}});
  // class 0: P 8/9, R 8/10; class 1: P 9/11, R 9/10; class 2: 1.
  const double f0 = 2.0 * (8.0 / 9) * (8.0 / 10) / (8.0 / 9 + 8.0 / 10);
  const double f1 = 2.0 * (9.0 / 11) * (9.0 / 10) / (9.0 / 11 + 9.0 / 10);
  EXPECT_NEAR(f0, 16.0 / 19.0, 1e-15);
  EXPECT_NEAR(macro_f1(cm), (f0 + f1 + 1.0) / 3.0, 1e-12);
  EXPECT_NEAR(micro_f1(cm), 27.0 / 30.0, 1e-15);
}

TEST(MacroF1, MatchesOracleOnRandomMatrices) {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + gen() % 5;
    std::vector<std::vector<std::size_t>> m(c, std::vector<std::size_t>(c));
    for (auto& row : m) {
      for (auto& v : row) v = gen() % 4 == 0 ? 0 : gen() % 50;
    }
    const auto cm = ConfusionMatrix::from_counts(m);
    const auto ref = oracle::f1_from_counts(m);
    EXPECT_NEAR(macro_f1(cm), ref.macro, 1e-12);
    const auto scores = per_class_scores(cm);
    for (std::size_t k = 0; k < c; ++k) {
      EXPECT_NEAR(scores[k].precision, ref.precision[k], 1e-12);
      EXPECT_NEAR(scores[k].recall, ref.recall[k], 1e-12);
    }
  }
}

TEST(MacroF1, InvariantUnderClassRelabeling) {
  std::mt19937_64 gen(4);
  std::vector<ClassIndex> g(90), p(90);
  for (auto& v : g) v = gen() % 3;
  for (auto& v : p) v = gen() % 3;
  const std::vector<ClassIndex> perm{2, 0, 1};
  std::vector<ClassIndex> g2, p2;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g2.push_back(perm[g[i]]);
    p2.push_back(perm[p[i]]);
  }
  EXPECT_NEAR(macro_f1(confusion(g, p, 3)), macro_f1(confusion(g2, p2, 3)), 1e-12);
}

TEST(Report, JsonShape) {
  const auto cm = ConfusionMatrix::from_counts({{8, 2, 0}, {1, 9, 0}, {0, 0, 10}});
  const auto j = to_json(make_report(cm, kNames), kNames);
  EXPECT_EQ(j.at("n"), 30);
  EXPECT_EQ(j.at("per_class").size(), 3u);
  EXPECT_EQ(j.at("per_class")[1].at("name"), "negative");
  EXPECT_EQ(j.at("per_class")[2].at("support"), 10);
  EXPECT_TRUE(j.at("flags").empty());
}

TEST(LabelingAccuracy, CountsMatches) {
  ShadowGold gold;
  std::vector<std::pair<std::string, ClassIndex>> all_right, half;
  for (int i = 0; i < 10; ++i) {
    const auto id = "u" + std::to_string(i);
    gold.set(id, static_cast<ClassIndex>(i % 3));
    all_right.emplace_back(id, i % 3);
    half.emplace_back(id, i < 5 ? i % 3 : (i + 1) % 3);
  }
  EXPECT_EQ(labeling_accuracy(all_right, gold), 1.0);
  EXPECT_EQ(labeling_accuracy(half, gold), 0.5);
  EXPECT_EQ(labeling_accuracy({}, gold), 0.0);
  const std::vector<std::pair<std::string, ClassIndex>> stranger{{"nope", 0}};
  EXPECT_THROW(labeling_accuracy(stranger, gold), LabelingError);
}

TEST(LabelingAccuracy, MatchesRecount) {
  std::mt19937_64 gen(9);
  ShadowGold gold;
  std::vector<std::pair<std::string, ClassIndex>> recs;
  std::size_t hits = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto id = "r" + std::to_string(i);
    const ClassIndex g = gen() % 3, p = gen() % 3;
    gold.set(id, g);
    recs.emplace_back(id, p);
    hits += g == p;
  }
  EXPECT_DOUBLE_EQ(labeling_accuracy(recs, gold), static_cast<double>(hits) / 1000.0);
}

TEST(Aggregate, MeanAndStudentInterval) {
  const std::vector<double> v{0.8, 0.9, 1.0};
  const auto a = aggregate(v);
  EXPECT_NEAR(a.mean, 0.9, 1e-15);
  // t(0.975, 2) = 4.302652729911275; sample sd = 0.1.
  EXPECT_NEAR(a.ci95_half_width, 4.302652729911275 * 0.1 / std::sqrt(3.0), 1e-9);
  const std::vector<double> one{0.7};
  EXPECT_EQ(aggregate(one).ci95_half_width, 0.0);
  EXPECT_EQ(aggregate(one).n, 1u);
}
