#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "sweep.hpp"

using namespace selftrain;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class SweepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("selftrain_sweep_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    corpus_ = oracle::synth_corpus(31, 0.15, 60, 30);
    std::ofstream tr(dir_ / "train.jsonl"), te(dir_ / "test.jsonl");
    write_jsonl(tr, corpus_.train);
    write_jsonl(te, corpus_.test);
  }

  ExperimentConfig config(json extra = json::object()) const {
    json j = {{"data", {{"train", "train.jsonl"}, {"test", "test.jsonl"}}},
              {"n_shot", 10},
              {"seeds", {1, 2, 3}},
              {"output_dir", "runs"}};
    j.update(extra);
    return config_from_json(j, dir_);
  }

  // Every training instance answered with its gold label and a score in (0, 1);
  // every 25th answer is unparseable.
  std::size_t write_score_fixture() const {
    std::ofstream out(dir_ / "scores.jsonl");
    std::size_t broken = 0;
    for (std::size_t i = 0; i < corpus_.train.size(); ++i) {
      const auto& inst = corpus_.train.instances[i];
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f", 0.01 + 0.98 * static_cast<double>((i * 37) % 100) / 99.0);
      std::string response = corpus_.train.class_names[*inst.gold_label] + " | score: " + buf;
      if (i % 25 == 0) {
        response = "hard to say";
        ++broken;
      }
      out << json{{"match", {{"mode", "by_id"}, {"key", inst.id}}}, {"response", response}}.dump() << "\n";
    }
    return broken;
  }

  fs::path dir_;
  oracle::Corpus corpus_;
};

}  // namespace

TEST(SweepSpecCheck, GridMustBeStrictlyMonotone) {
  SweepSpec s;
  s.grid = {0.5, 0.7, 0.6};
  EXPECT_THROW(s.validate(), ConfigError);
  s.grid = {0.9, 0.7, 0.5};
  EXPECT_NO_THROW(s.validate());
  s.grid = {};
  EXPECT_THROW(s.validate(), ConfigError);
  s.axis = SweepAxis::NShot;
  s.grid = {5, 7.5};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(SweepSpecCheck, DefaultGridsAndAxisNames) {
  const auto g = default_grid(SweepAxis::ConfThreshold);
  ASSERT_EQ(g.size(), 10u);
  EXPECT_DOUBLE_EQ(g.front(), 0.5);
  EXPECT_NEAR(g.back(), 0.95, 1e-12);
  const auto e = default_grid(SweepAxis::EntThreshold);
  ASSERT_EQ(e.size(), 10u);
  EXPECT_NO_THROW((SweepSpec{SweepAxis::EntThreshold, e, {}, 1}.validate()));
  EXPECT_EQ(default_grid(SweepAxis::NShot), (std::vector<double>{5, 10, 15, 20, 25, 30}));
  EXPECT_EQ(parse_axis("score_threshold"), SweepAxis::ScoreThreshold);
  EXPECT_THROW(parse_axis("temperature"), Error);
}

TEST(CellSeed, DependsOnlyOnItsInputs) {
  EXPECT_EQ(cell_seed(1, 0.5, 0), cell_seed(1, 0.5, 0));
  EXPECT_NE(cell_seed(1, 0.5, 0), cell_seed(1, 0.55, 0));
  EXPECT_NE(cell_seed(1, 0.5, 0), cell_seed(2, 0.5, 0));
  EXPECT_NE(cell_seed(1, 0.5, 0), cell_seed(1, 0.5, 1));
  EXPECT_EQ(cell_seed(1, 0.0, 0), cell_seed(1, -0.0, 0));
}

TEST_F(SweepTest, ScoreThresholdBoundaries) {
  const std::size_t broken = write_score_fixture();
  ASSERT_GT(broken, 0u);
  const auto cfg = config({{"llm", {{"mode", "obj-conf-score"}, {"threshold", 0.5}, {"fixtures", "scores.jsonl"}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::ScoreThreshold;
  spec.grid = {0.0, 1.0};
  const auto table = run_sweep(cfg, spec);
  ASSERT_EQ(table.rows.size(), 6u);
  const auto corpora = load_corpora(cfg);
  for (std::size_t si = 0; si < 3; ++si) {
    const auto run = prepare_run(cfg, corpora, table.seeds[si], cfg.n_shot);
    std::size_t pool_broken = 0;
    for (const auto& inst : run.sample.pool.instances) {
      for (std::size_t i = 0; i < corpus_.train.size(); i += 25) pool_broken += corpus_.train.instances[i].id == inst.id;
    }
    const auto& at0 = table.rows[si];
    const auto& at1 = table.rows[3 + si];
    EXPECT_TRUE(at0.error.empty()) << at0.error;
    EXPECT_EQ(at0.num_added, run.sample.pool.size() - pool_broken);
    EXPECT_EQ(at0.pseudo_label_accuracy, 1.0);
    EXPECT_EQ(at1.num_added, 0u);
    EXPECT_FALSE(at1.pseudo_label_accuracy.has_value());
    EXPECT_EQ(at0.baseline_metric, at1.baseline_metric);
  }
}

TEST_F(SweepTest, FrozenModelGivesNonIncreasingAdditions) {
  const auto cfg = config({{"termination", {{"max_iterations", 1}, {"patience", nullptr}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::ConfThreshold;
  spec.grid = {0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
  spec.parallel = 4;
  const auto table = run_sweep(cfg, spec);
  for (std::size_t si = 0; si < 3; ++si) {
    for (std::size_t vi = 1; vi < spec.grid.size(); ++vi) {
      EXPECT_LE(table.rows[vi * 3 + si].num_added, table.rows[(vi - 1) * 3 + si].num_added)
          << "seed index " << si << " t=" << spec.grid[vi];
    }
    EXPECT_GT(table.rows[si].num_added, 0u);
  }
}

TEST_F(SweepTest, FullRunsNeedNotBeMonotone) {
  // Look for a seed where a stricter threshold ends up adding more in total.
  const auto cfg = config({{"n_shot", 5}, {"split", {{"validation_fraction", 0.0}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::ConfThreshold;
  spec.grid = {0.6, 0.7, 0.8, 0.9, 0.95};
  spec.parallel = 4;
  for (std::uint64_t s = 1; s <= 20; ++s) spec.seeds.push_back(s);
  const auto table = run_sweep(cfg, spec);
  bool found = false;
  for (std::size_t si = 0; si < spec.seeds.size() && !found; ++si) {
    for (std::size_t vi = 1; vi < spec.grid.size(); ++vi) {
      const auto& lo = table.rows[(vi - 1) * spec.seeds.size() + si];
      const auto& hi = table.rows[vi * spec.seeds.size() + si];
      if (lo.error.empty() && hi.error.empty() && hi.num_added > lo.num_added) {
        found = true;
        std::printf("seed %llu: t=%.2f adds %zu, t=%.2f adds %zu\n", static_cast<unsigned long long>(lo.seed),
                    lo.value, lo.num_added, hi.value, hi.num_added);
        break;
      }
    }
  }
  EXPECT_TRUE(found);
}

TEST_F(SweepTest, ReportRowsAndRerender) {
  auto cfg = config({{"termination", {{"max_iterations", 2}, {"patience", nullptr}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::ConfThreshold;
  spec.grid = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
  spec.parallel = 3;
  const auto summary = cmd_sweep(cfg, spec);
  EXPECT_EQ(summary.at("rows"), 18);
  const auto out = cfg.output_dir;
  std::ifstream in(out / "sweep.tsv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "value\tseed\tnum_added\tpseudo_label_accuracy\ttest_metric\tbaseline_metric\terror");
  std::size_t data = 0, means = 0, cis = 0;
  while (std::getline(in, line)) {
    const auto seed = line.substr(line.find('\t') + 1, line.find('\t', line.find('\t') + 1) - line.find('\t') - 1);
    if (seed == "mean") ++means;
    else if (seed == "ci95") ++cis;
    else ++data;
  }
  EXPECT_EQ(data, 18u);
  EXPECT_EQ(means, 6u);
  EXPECT_EQ(cis, 6u);

  const auto plot = read_json(out / "plotdata.json");
  EXPECT_EQ(plot.at("x").size(), 6u);
  EXPECT_EQ(plot.at("bars").at("mean").size(), 6u);
  EXPECT_EQ(plot.at("lines").size(), 2u);
  EXPECT_EQ(plot.at("lines")[1].at("name"), "test_macro_f1");

  cmd_report(out / "sweep.json", dir_ / "again");
  for (const char* f : {"sweep.tsv", "sweep.json", "plotdata.json"}) {
    EXPECT_EQ(slurp(out / f), slurp(dir_ / "again" / f)) << f;
  }
}

TEST_F(SweepTest, ParallelismDoesNotChangeResults) {
  const auto cfg = config({{"termination", {{"max_iterations", 2}, {"patience", nullptr}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::EntThreshold;
  spec.grid = {0.2, 0.4, 0.6};
  spec.parallel = 1;
  const auto serial = to_json(run_sweep(cfg, spec));
  spec.parallel = 5;
  EXPECT_EQ(to_json(run_sweep(cfg, spec)), serial);
  EXPECT_EQ(to_json(sweep_from_json(serial)), serial);
}

TEST_F(SweepTest, NShotAxisRuns) {
  const auto cfg = config({{"termination", {{"max_iterations", 1}, {"patience", nullptr}}}});
  SweepSpec spec;
  spec.axis = SweepAxis::NShot;
  spec.grid = {5, 15};
  spec.seeds = {1};
  const auto table = run_sweep(cfg, spec);
  ASSERT_EQ(table.rows.size(), 2u);
  for (const auto& r : table.rows) EXPECT_TRUE(r.error.empty()) << r.error;
}

TEST_F(SweepTest, FailingCellsBecomeErrorRows) {
  // 60 per class leaves too few instances for a 100-shot sample.
  const auto cfg = config();
  SweepSpec spec;
  spec.axis = SweepAxis::NShot;
  spec.grid = {5, 100};
  spec.seeds = {1};
  const auto table = run_sweep(cfg, spec);
  EXPECT_TRUE(table.rows[0].error.empty());
  EXPECT_FALSE(table.rows[1].error.empty());
  EXPECT_FALSE(table.rows[1].test_metric.has_value());
}
