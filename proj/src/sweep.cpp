#include "sweep.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "metrics.hpp"

namespace selftrain {

namespace {

using nlohmann::json;

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

json agg_json(const Aggregate& a) {
  return {{"mean", a.mean}, {"ci95_half_width", a.ci95_half_width}, {"n", a.n}};
}

json opt_agg(const std::optional<Aggregate>& a) { return a ? agg_json(*a) : json(nullptr); }

std::string num(double v, const char* format = "%.6f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string num_or_na(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

// Tabs and newlines would break the TSV layout.
std::string tsv_clean(std::string s) {
  for (auto& c : s) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::vector<std::pair<std::string, ClassIndex>> migrated(const SelfTrainResult& result) {
  std::vector<std::pair<std::string, ClassIndex>> out;
  for (const auto& h : result.history) {
    if (!h.soft) out.insert(out.end(), h.selected.begin(), h.selected.end());
  }
  return out;
}

struct SeedContext {
  std::optional<PreparedRun> run;
  std::vector<LlmLabelRecord> records;
  std::optional<double> baseline;
  std::string error;
};

}  // namespace

SweepAxis parse_axis(std::string_view name) {
  if (name == "conf_threshold") return SweepAxis::ConfThreshold;
  if (name == "ent_threshold") return SweepAxis::EntThreshold;
  if (name == "score_threshold") return SweepAxis::ScoreThreshold;
  if (name == "n_shot") return SweepAxis::NShot;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "'");
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::ConfThreshold: return "conf_threshold";
    case SweepAxis::EntThreshold: return "ent_threshold";
    case SweepAxis::ScoreThreshold: return "score_threshold";
    case SweepAxis::NShot: return "n_shot";
  }
  return "unknown";
}

std::vector<double> default_grid(SweepAxis axis) {
  std::vector<double> grid;
  switch (axis) {
    case SweepAxis::ConfThreshold:
    case SweepAxis::ScoreThreshold:
      for (int i = 10; i <= 19; ++i) grid.push_back(i * 0.05);
      break;
    case SweepAxis::NShot:
      grid = {5, 10, 15, 20, 25, 30};
      break;
    case SweepAxis::EntThreshold:
      for (int i = 1; i <= 10; ++i) grid.push_back(i * 0.1);
      break;
  }
  return grid;
}

void SweepSpec::validate() const {
  if (grid.empty()) throw ConfigError(std::string("sweep grid for ") + to_string(axis) + " is empty");
  bool up = true, down = true;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    up = up && grid[i] > grid[i - 1];
    down = down && grid[i] < grid[i - 1];
  }
  if (grid.size() > 1 && !up && !down) throw ConfigError("sweep grid must be strictly monotone");
  for (const double v : grid) {
    if (!std::isfinite(v)) throw ConfigError("sweep grid values must be finite");
    if (axis == SweepAxis::NShot && (v < 1 || v != std::floor(v))) {
      throw ConfigError("n_shot grid values must be positive integers");
    }
  }
  if (parallel == 0) throw ConfigError("sweep parallelism must be >= 1");
}

std::uint64_t cell_seed(std::uint64_t seed, double value, std::size_t seed_index) {
  const double v = value == 0.0 ? 0.0 : value;  // fold -0.0
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(seed_index)), std::bit_cast<std::uint64_t>(v));
}

SweepTable run_sweep(const ExperimentConfig& config, const SweepSpec& spec_in, const Logger& log) {
  SweepSpec spec = spec_in;
  if (spec.seeds.empty()) spec.seeds = config.seeds;
  spec.validate();
  const bool llm_axis = spec.axis == SweepAxis::ScoreThreshold;
  if (llm_axis && !config.llm) throw ConfigError("score_threshold sweeps need an 'llm' block");

  const auto corpora = load_corpora(config);
  // Per-seed state shared by every cell of that seed: the prepared split and,
  // for score sweeps, one LLM labeling pass.
  std::vector<SeedContext> contexts(spec.seeds.size());
  if (spec.axis != SweepAxis::NShot) {
    for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
      auto& ctx = contexts[si];
      try {
        ctx.run = prepare_run(config, corpora, spec.seeds[si], config.n_shot);
        if (llm_axis) {
          auto llm = *config.llm;
          const auto setup = make_llm(llm, ctx.run->seeds.llm);
          const auto examples = select_few_shot(ctx.run->sample.labeled, llm.n_shot, ctx.run->seeds.llm);
          ctx.records = llm_pseudo_label(*setup.client, setup.prompt, ctx.run->sample.pool, LlmMode::ObjConfScore,
                                         examples, llm.n_shot, setup.options);
          const auto baseline = run_supervised(ctx.run->sample.labeled, engine_config(config, *ctx.run));
          ctx.baseline = evaluate(*baseline, ctx.run->test).macro_f1;
        }
      } catch (const std::exception& e) {
        ctx.error = e.what();
      }
    }
  }

  SweepTable table;
  table.axis = spec.axis;
  table.grid = spec.grid;
  table.seeds = spec.seeds;
  const std::size_t n_seeds = spec.seeds.size();
  table.rows.resize(spec.grid.size() * n_seeds);

  const auto run_cell = [&](std::size_t index) {
    const std::size_t vi = index / n_seeds;
    const std::size_t si = index % n_seeds;
    SweepRow row;
    row.value = spec.grid[vi];
    row.seed = spec.seeds[si];
    try {
      const auto& ctx = contexts[si];
      if (!ctx.error.empty()) throw std::runtime_error(ctx.error);
      if (llm_axis) {
        const auto& run = *ctx.run;
        const auto kept = filter_records(ctx.records, LlmMode::ObjConfScore, row.value);
        row.num_added = kept.size();
        if (!kept.empty()) row.pseudo_label_accuracy = labeling_accuracy(kept, run.sample.shadow_gold);
        const auto model = train_slm_on_pseudo_labels(kept, run.sample.pool, run.sample.labeled,
                                                      classifier_factory(config, run.seeds),
                                                      run.validation ? &*run.validation : nullptr);
        row.test_metric = evaluate(*model, run.test).macro_f1;
        row.baseline_metric = ctx.baseline;
      } else {
        std::optional<PreparedRun> own;
        SelectionStrategy strategy = config.strategy;
        if (spec.axis == SweepAxis::NShot) {
          own = prepare_run(config, corpora, row.seed, static_cast<std::size_t>(row.value));
        } else if (spec.axis == SweepAxis::ConfThreshold) {
          strategy.rule = ConfThreshold{row.value};
        } else {
          strategy.rule = EntThreshold{row.value};
        }
        const PreparedRun& run = own ? *own : *ctx.run;
        auto engine = engine_config(config, run);
        engine.strategy_seed = cell_seed(row.seed, row.value, si);
        const auto observer = [&](const SelfTrainState& state, const TextClassifier& model) {
          if (state.iteration == 0) row.baseline_metric = evaluate(model, run.test).macro_f1;
        };
        const auto result = run_self_training(run.sample.labeled, run.sample.pool, strategy, config.termination,
                                              engine, observer);
        row.num_added = result.final_labeled_size - run.sample.labeled.size();
        const auto pairs = migrated(result);
        if (!pairs.empty()) row.pseudo_label_accuracy = labeling_accuracy(pairs, run.sample.shadow_gold);
        row.test_metric = evaluate(*result.model, run.test).macro_f1;
      }
    } catch (const std::exception& e) {
      row.error = e.what();
      row.num_added = 0;
      row.pseudo_label_accuracy.reset();
      row.test_metric.reset();
    }
    table.rows[index] = std::move(row);
  };

  std::mutex log_mutex;
  const auto report = [&](std::size_t index) {
    if (!log) return;
    const auto& r = table.rows[index];
    std::lock_guard lock(log_mutex);
    log(std::string(to_string(spec.axis)) + "=" + num(r.value, "%g") + " seed " + std::to_string(r.seed) + ": " +
        (r.error.empty() ? "added " + std::to_string(r.num_added) + ", macro_f1=" + num_or_na(r.test_metric)
                         : "error: " + r.error));
  };

  const std::size_t cells = table.rows.size();
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells; i = next++) {
      run_cell(i);
      report(i);
    }
  };
  const std::size_t threads = std::min(spec.parallel, cells);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return table;
}

std::vector<SweepAggregate> aggregate_rows(const SweepTable& table) {
  std::vector<SweepAggregate> out;
  for (const double value : table.grid) {
    std::vector<double> added, acc, metric;
    for (const auto& r : table.rows) {
      if (r.value != value || !r.error.empty()) continue;
      added.push_back(static_cast<double>(r.num_added));
      if (r.pseudo_label_accuracy) acc.push_back(*r.pseudo_label_accuracy);
      if (r.test_metric) metric.push_back(*r.test_metric);
    }
    SweepAggregate a;
    a.value = value;
    a.n_ok = added.size();
    a.num_added = aggregate(added);
    if (!acc.empty()) a.pseudo_label_accuracy = aggregate(acc);
    if (!metric.empty()) a.test_metric = aggregate(metric);
    out.push_back(a);
  }
  return out;
}

json to_json(const SweepTable& table) {
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"value", r.value},
                    {"seed", r.seed},
                    {"num_added", r.num_added},
                    {"pseudo_label_accuracy", opt(r.pseudo_label_accuracy)},
                    {"test_metric", opt(r.test_metric)},
                    {"baseline_metric", opt(r.baseline_metric)},
                    {"error", r.error.empty() ? json(nullptr) : json(r.error)}});
  }
  json aggregates = json::array();
  for (const auto& a : aggregate_rows(table)) {
    aggregates.push_back({{"value", a.value},
                          {"n_ok", a.n_ok},
                          {"num_added", agg_json(a.num_added)},
                          {"pseudo_label_accuracy", opt_agg(a.pseudo_label_accuracy)},
                          {"test_metric", opt_agg(a.test_metric)}});
  }
  return {{"axis", to_string(table.axis)},
          {"metric", "macro_f1"},
          {"grid", table.grid},
          {"seeds", table.seeds},
          {"rows", std::move(rows)},
          {"aggregates", std::move(aggregates)}};
}

SweepTable sweep_from_json(const json& j) {
  try {
    SweepTable t;
    t.axis = parse_axis(j.at("axis").get<std::string>());
    t.grid = j.at("grid").get<std::vector<double>>();
    t.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& r : j.at("rows")) {
      SweepRow row;
      row.value = r.at("value").get<double>();
      row.seed = r.at("seed").get<std::uint64_t>();
      row.num_added = r.at("num_added").get<std::size_t>();
      row.pseudo_label_accuracy = opt_from(r, "pseudo_label_accuracy");
      row.test_metric = opt_from(r, "test_metric");
      row.baseline_metric = opt_from(r, "baseline_metric");
      if (r.contains("error") && !r.at("error").is_null()) row.error = r.at("error").get<std::string>();
      t.rows.push_back(std::move(row));
    }
    return t;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed sweep table: ") + e.what());
  }
}

void render_report(const SweepTable& table, const std::filesystem::path& out_dir) {
  if (table.rows.empty()) throw InvalidArgument("cannot render an empty sweep table");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());

  const auto aggregates = aggregate_rows(table);
  std::string tsv = "value\tseed\tnum_added\tpseudo_label_accuracy\ttest_metric\tbaseline_metric\terror\n";
  for (const auto& r : table.rows) {
    tsv += num(r.value, "%g") + "\t" + std::to_string(r.seed) + "\t" + std::to_string(r.num_added) + "\t" +
           num_or_na(r.pseudo_label_accuracy) + "\t" + num_or_na(r.test_metric) + "\t" +
           num_or_na(r.baseline_metric) + "\t" + tsv_clean(r.error) + "\n";
  }
  for (const auto& a : aggregates) {
    const auto mean_of = [](const std::optional<Aggregate>& x) {
      return x ? std::optional<double>(x->mean) : std::nullopt;
    };
    const auto ci_of = [](const std::optional<Aggregate>& x) {
      return x ? std::optional<double>(x->ci95_half_width) : std::nullopt;
    };
    tsv += num(a.value, "%g") + "\tmean\t" + num(a.num_added.mean) + "\t" + num_or_na(mean_of(a.pseudo_label_accuracy)) +
           "\t" + num_or_na(mean_of(a.test_metric)) + "\tNA\t\n";
    tsv += num(a.value, "%g") + "\tci95\t" + num(a.num_added.ci95_half_width) + "\t" +
           num_or_na(ci_of(a.pseudo_label_accuracy)) + "\t" + num_or_na(ci_of(a.test_metric)) + "\tNA\t\n";
  }
  write_text(out_dir / "sweep.tsv", tsv);
  write_json(out_dir / "sweep.json", to_json(table));

  json bars_mean = json::array(), bars_ci = json::array();
  json acc_mean = json::array(), acc_ci = json::array();
  json f1_mean = json::array(), f1_ci = json::array();
  for (const auto& a : aggregates) {
    bars_mean.push_back(a.num_added.mean);
    bars_ci.push_back(a.num_added.ci95_half_width);
    acc_mean.push_back(a.pseudo_label_accuracy ? json(a.pseudo_label_accuracy->mean) : json(nullptr));
    acc_ci.push_back(a.pseudo_label_accuracy ? json(a.pseudo_label_accuracy->ci95_half_width) : json(nullptr));
    f1_mean.push_back(a.test_metric ? json(a.test_metric->mean) : json(nullptr));
    f1_ci.push_back(a.test_metric ? json(a.test_metric->ci95_half_width) : json(nullptr));
  }
  json plot = {{"axis", to_string(table.axis)},
               {"x", table.grid},
               {"bars", {{"name", "num_added"}, {"mean", bars_mean}, {"ci95", bars_ci}}},
               {"lines",
                json::array({{{"name", "pseudo_label_accuracy"}, {"mean", acc_mean}, {"ci95", acc_ci}},
                             {{"name", "test_macro_f1"}, {"mean", f1_mean}, {"ci95", f1_ci}}})}};
  write_json(out_dir / "plotdata.json", plot);
}

json cmd_sweep(const ExperimentConfig& config_in, const SweepSpec& spec, const RunOptions& options) {
  const auto config = apply_options(config_in, options);
  const auto table = run_sweep(config, spec, options.log);
  std::error_code ec;
  std::filesystem::create_directories(config.output_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + config.output_dir.string() + "': " + ec.message());
  write_json(config.output_dir / "config.resolved.json", to_json(config));
  render_report(table, config.output_dir);
  std::size_t failed = 0;
  for (const auto& r : table.rows) failed += r.error.empty() ? 0 : 1;
  return {{"command", "sweep"},
          {"axis", to_string(table.axis)},
          {"rows", table.rows.size()},
          {"failed_cells", failed},
          {"output_dir", config.output_dir.string()}};
}

json cmd_report(const std::filesystem::path& sweep_json, const std::filesystem::path& out_dir) {
  if (!std::filesystem::is_regular_file(sweep_json)) {
    throw ConfigError("sweep table not found: " + sweep_json.string());
  }
  const auto table = sweep_from_json(read_json(sweep_json));
  render_report(table, out_dir);
  return {{"command", "report"}, {"rows", table.rows.size()}, {"output_dir", out_dir.string()}};
}

}  // namespace selftrain
