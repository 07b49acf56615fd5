#include "experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "metrics.hpp"

namespace selftrain {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Runs f, turning JSON type errors and argument errors into ConfigError.
template <class F>
auto guarded(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument || e.kind() == ErrorKind::Data || e.kind() == ErrorKind::Llm) {
      throw ConfigError(where + ": " + e.what());
    }
    throw;
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

fs::path existing_file(const fs::path& base, const std::string& p, const std::string& what) {
  auto path = resolve(base, p);
  if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path.string());
  return path;
}

const char* format_name(DataFormat f) { return f == DataFormat::Jsonl ? "jsonl" : "csv"; }

void log_to(const Logger& log, const std::string& message) {
  if (log) log(message);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

json aggregate_json(const std::vector<double>& values) {
  const auto a = aggregate(values);
  return {{"mean", a.mean}, {"ci95_half_width", a.ci95_half_width}, {"n", a.n}};
}

struct RunSummary {
  std::uint64_t seed;
  double accuracy;
  double macro_f1;
  json extra = json::object();
};

json finish(const fs::path& out, const std::string& command, const std::vector<RunSummary>& runs) {
  json list = json::array();
  std::vector<double> acc, f1;
  for (const auto& r : runs) {
    json entry = {{"seed", r.seed}, {"dir", seed_dir_name(r.seed)}, {"accuracy", r.accuracy}, {"macro_f1", r.macro_f1}};
    entry.update(r.extra);
    list.push_back(std::move(entry));
    acc.push_back(r.accuracy);
    f1.push_back(r.macro_f1);
  }
  json summary = {{"command", command},
                  {"runs", std::move(list)},
                  {"accuracy", aggregate_json(acc)},
                  {"macro_f1", aggregate_json(f1)}};
  write_json(out / "aggregate.json", summary);
  summary["output_dir"] = out.string();
  return summary;
}

fs::path start_output(const ExperimentConfig& config) {
  const auto& out = config.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out.string() + "': " + ec.message());
  write_json(out / "config.resolved.json", to_json(config));
  return out;
}

fs::path start_seed_dir(const ExperimentConfig& config, const PreparedRun& run) {
  const auto dir = config.output_dir / seed_dir_name(run.seeds.root);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory '" + dir.string() + "': " + ec.message());
  auto single = config;
  single.seeds = {run.seeds.root};
  write_json(dir / "config.resolved.json", to_json(single));
  write_json(dir / "seeds.json", run.seeds.to_json());
  return dir;
}

void write_records(const fs::path& path, const std::vector<LlmLabelRecord>& records,
                   const std::vector<std::string>& class_names) {
  std::string text;
  for (const auto& r : records) text += to_json(r, class_names).dump() + "\n";
  write_text(path, text);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j, {"data", "split", "n_shot", "seeds", "strategy", "termination", "classifier", "llm", "output_dir"},
             "config");
  ExperimentConfig c;

  const auto& data = j.contains("data") ? j.at("data") : throw ConfigError("config: missing 'data' block");
  check_keys(data, {"train", "test", "format", "class_names"}, "data");
  guarded("data", [&] {
    if (data.contains("class_names")) c.data.class_names = data.at("class_names").get<std::vector<std::string>>();
    if (c.data.class_names.size() < 2) throw ConfigError("data.class_names needs at least two classes");
    if (std::set<std::string>(c.data.class_names.begin(), c.data.class_names.end()).size() !=
        c.data.class_names.size()) {
      throw ConfigError("data.class_names must be distinct");
    }
    if (data.contains("format")) c.data.format = parse_format(data.at("format").get<std::string>());
    c.data.train = existing_file(base_dir, data.at("train").get<std::string>(), "dataset file");
    if (data.contains("test") && !data.at("test").is_null()) {
      c.data.test = existing_file(base_dir, data.at("test").get<std::string>(), "dataset file");
    }
    return 0;
  });

  if (j.contains("split")) {
    const auto& s = j.at("split");
    check_keys(s, {"test_fraction", "validation_fraction"}, "split");
    guarded("split", [&] {
      c.split.test_fraction = s.value("test_fraction", c.split.test_fraction);
      c.split.validation_fraction = s.value("validation_fraction", c.split.validation_fraction);
      return 0;
    });
  }
  if (!(c.split.test_fraction > 0.0 && c.split.test_fraction < 1.0)) {
    throw ConfigError("split.test_fraction must be in (0, 1)");
  }
  if (!(c.split.validation_fraction >= 0.0 && c.split.validation_fraction < 1.0)) {
    throw ConfigError("split.validation_fraction must be in [0, 1)");
  }

  guarded("n_shot", [&] {
    if (j.contains("n_shot")) c.n_shot = j.at("n_shot").get<std::size_t>();
    return 0;
  });
  if (c.n_shot == 0) throw ConfigError("n_shot must be positive");

  guarded("seeds", [&] {
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    return 0;
  });
  if (c.seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }

  if (j.contains("strategy")) {
    c.strategy = guarded("strategy", [&] { return strategy_from_json(j.at("strategy")); });
  }
  if (j.contains("termination")) {
    c.termination = guarded("termination", [&] { return termination_from_json(j.at("termination")); });
  }
  if (c.strategy.is_soft() && !c.termination.max_iterations) c.termination.max_iterations = kDefaultSoftIterations;

  if (j.contains("classifier")) {
    const auto& k = j.at("classifier");
    check_keys(k, {"learning_rate", "max_epochs", "l2", "inner_patience", "dim_bits"}, "classifier");
    guarded("classifier", [&] {
      auto& h = c.classifier.hyperparams;
      h.learning_rate = k.value("learning_rate", h.learning_rate);
      h.max_epochs = k.value("max_epochs", h.max_epochs);
      h.l2 = k.value("l2", h.l2);
      h.inner_patience = k.value("inner_patience", h.inner_patience);
      c.classifier.dim_bits = k.value("dim_bits", c.classifier.dim_bits);
      return 0;
    });
    const auto& h = c.classifier.hyperparams;
    if (!(h.learning_rate > 0.0)) throw ConfigError("classifier.learning_rate must be positive");
    if (h.max_epochs == 0) throw ConfigError("classifier.max_epochs must be positive");
    if (!(h.l2 >= 0.0)) throw ConfigError("classifier.l2 must be >= 0");
    if (c.classifier.dim_bits < 1 || c.classifier.dim_bits > 24) {
      throw ConfigError("classifier.dim_bits must be in [1, 24]");
    }
  }
  c.classifier.num_classes = c.data.class_names.size();

  if (j.contains("llm") && !j.at("llm").is_null()) {
    const auto& l = j.at("llm");
    check_keys(l,
               {"mode", "threshold", "n_shot", "endpoint", "fixtures", "model", "temperature", "timeout_ms",
                "max_retries", "max_in_flight", "auth_env", "base_delay_ms", "max_delay_ms", "failure_limit",
                "template", "max_prompt_chars"},
               "llm");
    LlmConfig m;
    guarded("llm", [&] {
      if (l.contains("mode")) m.mode = parse_mode(l.at("mode").get<std::string>());
      if (l.contains("threshold") && !l.at("threshold").is_null()) m.threshold = l.at("threshold").get<double>();
      m.n_shot = l.value("n_shot", m.n_shot);
      if (l.contains("endpoint") && !l.at("endpoint").is_null()) m.endpoint = l.at("endpoint").get<std::string>();
      if (l.contains("fixtures") && !l.at("fixtures").is_null()) {
        m.fixtures = existing_file(base_dir, l.at("fixtures").get<std::string>(), "LLM fixture file");
      }
      m.model = l.value("model", m.model);
      m.temperature = l.value("temperature", m.temperature);
      m.timeout_ms = l.value("timeout_ms", m.timeout_ms);
      m.max_retries = l.value("max_retries", m.max_retries);
      m.max_in_flight = l.value("max_in_flight", m.max_in_flight);
      m.auth_env = l.value("auth_env", m.auth_env);
      m.base_delay_ms = l.value("base_delay_ms", m.base_delay_ms);
      m.max_delay_ms = l.value("max_delay_ms", m.max_delay_ms);
      m.failure_limit = l.value("failure_limit", m.failure_limit);
      if (l.contains("template") && !l.at("template").is_null()) {
        m.prompt_template = existing_file(base_dir, l.at("template").get<std::string>(), "prompt template");
      }
      if (l.contains("max_prompt_chars") && !l.at("max_prompt_chars").is_null()) {
        m.max_prompt_chars = l.at("max_prompt_chars").get<std::size_t>();
      }
      return 0;
    });
    if (!(m.temperature >= 0.0)) throw ConfigError("llm.temperature must be >= 0");
    if (m.max_in_flight == 0) throw ConfigError("llm.max_in_flight must be >= 1");
    if (m.timeout_ms == 0) throw ConfigError("llm.timeout_ms must be positive");
    if (!(m.failure_limit >= 0.0 && m.failure_limit <= 1.0)) throw ConfigError("llm.failure_limit must be in [0, 1]");
    if (m.threshold && !(*m.threshold >= 0.0 && *m.threshold <= 1.0)) {
      throw ConfigError("llm.threshold must be in [0, 1]");
    }
    c.llm = std::move(m);
  }

  guarded("output_dir", [&] {
    c.output_dir = resolve(base_dir, j.value("output_dir", std::string("runs")));
    return 0;
  });
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const auto base = fs::absolute(path).parent_path();
  return config_from_json(j, base);
}

json to_json(const ExperimentConfig& c) {
  json data = {{"train", c.data.train.string()},
               {"test", c.data.test ? json(c.data.test->string()) : json(nullptr)},
               {"format", format_name(c.data.format)},
               {"class_names", c.data.class_names}};
  const auto& h = c.classifier.hyperparams;
  json j = {{"data", std::move(data)},
            {"split", {{"test_fraction", c.split.test_fraction}, {"validation_fraction", c.split.validation_fraction}}},
            {"n_shot", c.n_shot},
            {"seeds", c.seeds},
            {"strategy", to_json(c.strategy)},
            {"termination", to_json(c.termination)},
            {"classifier",
             {{"learning_rate", h.learning_rate},
              {"max_epochs", h.max_epochs},
              {"l2", h.l2},
              {"inner_patience", h.inner_patience},
              {"dim_bits", c.classifier.dim_bits}}},
            {"output_dir", c.output_dir.string()}};
  if (c.llm) {
    const auto& m = *c.llm;
    j["llm"] = {{"mode", to_string(m.mode)},
                {"threshold", m.threshold ? json(*m.threshold) : json(nullptr)},
                {"n_shot", m.n_shot},
                {"endpoint", m.endpoint ? json(*m.endpoint) : json(nullptr)},
                {"fixtures", m.fixtures ? json(m.fixtures->string()) : json(nullptr)},
                {"model", m.model},
                {"temperature", m.temperature},
                {"timeout_ms", m.timeout_ms},
                {"max_retries", m.max_retries},
                {"max_in_flight", m.max_in_flight},
                {"auth_env", m.auth_env},
                {"base_delay_ms", m.base_delay_ms},
                {"max_delay_ms", m.max_delay_ms},
                {"failure_limit", m.failure_limit},
                {"template", m.prompt_template ? json(m.prompt_template->string()) : json(nullptr)},
                {"max_prompt_chars", m.max_prompt_chars ? json(*m.max_prompt_chars) : json(nullptr)}};
  } else {
    j["llm"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Runs

SeedPlan SeedPlan::from_root(std::uint64_t root) {
  SeedPlan s;
  s.root = root;
  s.split = derive_seed(root, "split");
  s.validation = derive_seed(root, "validation");
  s.shot = derive_seed(root, "shot");
  s.train = derive_seed(root, "train");
  s.strategy = derive_seed(root, "strategy");
  s.llm = derive_seed(root, "llm");
  return s;
}

json SeedPlan::to_json() const {
  return {{"root", root},         {"split", split},       {"validation", validation}, {"shot", shot},
          {"train", train},       {"strategy", strategy}, {"llm", llm},
          {"derivation", "child = splitmix64(parent ^ splitmix64(fnv1a64(purpose)))"}};
}

Corpora load_corpora(const ExperimentConfig& config) {
  Corpora c;
  c.train = load_dataset(config.data.train, config.data.format, config.data.class_names);
  if (config.data.test) c.test = load_dataset(*config.data.test, config.data.format, config.data.class_names);
  return c;
}

PreparedRun prepare_run(const ExperimentConfig& config, const Corpora& corpora, std::uint64_t root_seed,
                        std::size_t n_shot) {
  PreparedRun run;
  run.seeds = SeedPlan::from_root(root_seed);
  Dataset train;
  if (corpora.test) {
    train = corpora.train;
    run.test = *corpora.test;
  } else {
    auto split = split_train_test(corpora.train, {config.split.test_fraction, run.seeds.split});
    train = std::move(split.train);
    run.test = std::move(split.test);
  }
  if (config.split.validation_fraction > 0.0) {
    auto split = split_train_test(train, {config.split.validation_fraction, run.seeds.validation});
    train = std::move(split.train);
    run.validation = std::move(split.test);
  }
  run.sample = sample_n_shot(train, n_shot, run.seeds.shot);
  return run;
}

ClassifierFactory classifier_factory(const ExperimentConfig& config, const SeedPlan& seeds) {
  auto c = config.classifier;
  c.num_classes = config.data.class_names.size();
  c.hyperparams.seed = seeds.train;
  return baseline_factory(c);
}

EngineConfig engine_config(const ExperimentConfig& config, const PreparedRun& run) {
  EngineConfig e;
  e.make_classifier = classifier_factory(config, run.seeds);
  e.strategy_seed = run.seeds.strategy;
  e.validation = run.validation ? &*run.validation : nullptr;
  e.shadow_gold = &run.sample.shadow_gold;
  return e;
}

LlmSetup make_llm(const LlmConfig& llm, std::uint64_t jitter_seed) {
  if (llm.fixtures && llm.endpoint) throw ConfigError("llm: set either fixtures or endpoint, not both");
  if (!llm.fixtures && !llm.endpoint) throw ConfigError("llm: neither fixtures nor endpoint is set");
  LlmSetup s;
  RetryPolicy retry{llm.max_retries, std::chrono::milliseconds(llm.base_delay_ms),
                    std::chrono::milliseconds(llm.max_delay_ms), jitter_seed};
  if (llm.fixtures) {
    s.client = std::make_unique<LlmClient>(MockTransport::from_file(*llm.fixtures), retry);
  } else {
    LlmClientConfig cc;
    cc.endpoint = *llm.endpoint;
    cc.model = llm.model;
    cc.temperature = llm.temperature;
    cc.timeout = std::chrono::milliseconds(llm.timeout_ms);
    cc.max_retries = llm.max_retries;
    cc.max_in_flight = llm.max_in_flight;
    cc.auth_env = llm.auth_env;
    cc.base_delay = retry.base_delay;
    cc.max_delay = retry.max_delay;
    cc.seed = jitter_seed;
    s.client = guarded("llm", [&] { return http_client(cc); });
  }
  s.prompt = llm.prompt_template ? PromptTemplate::load(*llm.prompt_template) : PromptTemplate::builtin();
  if (llm.max_prompt_chars) s.prompt.max_prompt_chars = *llm.max_prompt_chars;
  s.options.model = llm.model;
  s.options.temperature = llm.temperature;
  s.options.max_in_flight = llm.max_in_flight;
  s.options.failure_limit = llm.failure_limit;
  return s;
}

ExperimentConfig apply_options(ExperimentConfig config, const RunOptions& options) {
  if (options.seed) config.seeds = {*options.seed};
  if (options.out) config.output_dir = fs::absolute(*options.out).lexically_normal();
  return config;
}

// ---------------------------------------------------------------------------
// Commands

json cmd_train(const ExperimentConfig& config_in, const RunOptions& options) {
  const auto config = apply_options(config_in, options);
  const auto corpora = load_corpora(config);
  const auto out = start_output(config);
  std::vector<RunSummary> runs;
  for (const auto seed : config.seeds) {
    const auto run = prepare_run(config, corpora, seed, config.n_shot);
    const auto dir = start_seed_dir(config, run);
    const auto model = run_supervised(run.sample.labeled, engine_config(config, run));
    write_text(dir / "model.json", model->serialize());
    const auto report = evaluate(*model, run.test);
    write_json(dir / "metrics.json", to_json(report, config.data.class_names));
    log_to(options.log, "seed " + std::to_string(seed) + ": macro_f1=" + fmt(report.macro_f1) +
                            " accuracy=" + fmt(report.accuracy));
    runs.push_back({seed, report.accuracy, report.macro_f1});
  }
  return finish(out, "train", runs);
}

json cmd_selftrain(const ExperimentConfig& config_in, const RunOptions& options) {
  const auto config = apply_options(config_in, options);
  const auto corpora = load_corpora(config);
  const auto out = start_output(config);
  const auto& names = config.data.class_names;
  std::vector<RunSummary> runs;
  for (const auto seed : config.seeds) {
    const auto run = prepare_run(config, corpora, seed, config.n_shot);
    const auto dir = start_seed_dir(config, run);
    std::optional<MetricsReport> baseline;
    const auto observer = [&](const SelfTrainState& state, const TextClassifier& model) {
      if (state.iteration == 0) baseline = evaluate(model, run.test);
      if (!state.history.empty()) {
        const auto& h = state.history.back();
        log_to(options.log, "seed " + std::to_string(seed) + " iteration " + std::to_string(h.iteration) +
                                ": selected " + std::to_string(h.num_selected) + ", labeled " +
                                std::to_string(h.labeled_size_after) + ", pool " + std::to_string(h.pool_size_after));
      }
    };
    const auto write_history = [&](const std::vector<IterationRecord>& history) {
      std::string text;
      for (const auto& h : history) text += to_json(h).dump() + "\n";
      write_text(dir / "history.jsonl", text);
    };
    SelfTrainResult result;
    try {
      result = run_self_training(run.sample.labeled, run.sample.pool, config.strategy, config.termination,
                                 engine_config(config, run), observer);
    } catch (const SelfTrainAborted& e) {
      write_history(e.history());
      throw;
    }
    write_history(result.history);
    write_text(dir / "model.json", result.model->serialize());

    auto report = evaluate(*result.model, run.test);
    std::vector<std::pair<std::string, ClassIndex>> migrated;
    for (const auto& h : result.history) {
      if (!h.soft) migrated.insert(migrated.end(), h.selected.begin(), h.selected.end());
    }
    if (!migrated.empty()) report.labeling_accuracy = labeling_accuracy(migrated, run.sample.shadow_gold);
    auto metrics = to_json(report, names);
    const std::size_t num_added = result.final_labeled_size - run.sample.labeled.size();
    metrics["self_training"] = {{"strategy", config.strategy.name()},
                                {"stop_reason", result.stop_reason},
                                {"iterations", result.history.size()},
                                {"model_iteration", result.model_iteration},
                                {"num_added", num_added},
                                {"final_labeled_size", result.final_labeled_size}};
    if (baseline) metrics["baseline"] = {{"accuracy", baseline->accuracy}, {"macro_f1", baseline->macro_f1}};
    write_json(dir / "metrics.json", metrics);
    log_to(options.log, "seed " + std::to_string(seed) + ": macro_f1=" + fmt(report.macro_f1) + " (supervised " +
                            (baseline ? fmt(baseline->macro_f1) : std::string("n/a")) + "), stop=" +
                            result.stop_reason);
    RunSummary s{seed, report.accuracy, report.macro_f1};
    s.extra["num_added"] = num_added;
    if (baseline) s.extra["baseline_macro_f1"] = baseline->macro_f1;
    runs.push_back(std::move(s));
  }
  auto summary = finish(out, "selftrain", runs);
  std::vector<double> base;
  for (const auto& r : runs) {
    if (r.extra.contains("baseline_macro_f1")) base.push_back(r.extra["baseline_macro_f1"].get<double>());
  }
  if (base.size() == runs.size()) {
    summary["baseline_macro_f1"] = aggregate_json(base);
    auto stored = summary;
    stored.erase("output_dir");
    write_json(out / "aggregate.json", stored);
  }
  return summary;
}

json cmd_llm_label(const ExperimentConfig& config_in, const LlmOverrides& overrides, const RunOptions& options) {
  if (!config_in.llm) throw ConfigError("llm-label needs an 'llm' block in the config");
  auto config = apply_options(config_in, options);
  auto& llm = *config.llm;
  if (overrides.mode) {
    llm.mode = *overrides.mode;
    // A configured threshold only applies to the score mode.
    if (llm.mode != LlmMode::ObjConfScore) llm.threshold.reset();
  }
  if (overrides.threshold) llm.threshold = *overrides.threshold;
  if (overrides.n_shot) llm.n_shot = *overrides.n_shot;
  if (overrides.fixtures) {
    if (!fs::is_regular_file(*overrides.fixtures)) {
      throw ConfigError("LLM fixture file not found: " + overrides.fixtures->string());
    }
    llm.fixtures = fs::absolute(*overrides.fixtures).lexically_normal();
    llm.endpoint.reset();
  }
  if (overrides.endpoint) {
    llm.endpoint = *overrides.endpoint;
    llm.fixtures.reset();
  }
  if (llm.mode == LlmMode::ObjConfScore && !llm.threshold) {
    throw ConfigError("obj-conf-score mode needs a threshold");
  }
  if (llm.mode != LlmMode::ObjConfScore && llm.threshold) {
    throw ConfigError(std::string("mode ") + to_string(llm.mode) + " takes no threshold");
  }
  if (llm.threshold && !(*llm.threshold >= 0.0 && *llm.threshold <= 1.0)) {
    throw ConfigError("threshold must be in [0, 1]");
  }
  if (llm.n_shot > config.n_shot) {
    throw ConfigError("llm.n_shot (" + std::to_string(llm.n_shot) + ") exceeds n_shot (" +
                      std::to_string(config.n_shot) + ")");
  }
  const auto& names = config.data.class_names;
  const auto corpora = load_corpora(config);
  const auto out = start_output(config);
  std::vector<RunSummary> runs;
  for (const auto seed : config.seeds) {
    const auto run = prepare_run(config, corpora, seed, config.n_shot);
    const auto dir = start_seed_dir(config, run);
    const auto setup = make_llm(llm, run.seeds.llm);
    const auto examples = select_few_shot(run.sample.labeled, llm.n_shot, run.seeds.llm);
    const bool sub = llm.mode == LlmMode::Sub;
    const Dataset& target = sub ? run.test : run.sample.pool;
    std::vector<LlmLabelRecord> records;
    try {
      records = llm_pseudo_label(*setup.client, setup.prompt, target, llm.mode, examples, llm.n_shot, setup.options);
    } catch (const LlmAborted& e) {
      write_records(dir / "records.jsonl", e.records(), names);
      throw;
    }
    write_records(dir / "records.jsonl", records, names);
    const auto failed = static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const LlmLabelRecord& r) { return !r.ok(); }));
    json llm_info = {{"mode", to_string(llm.mode)},
                     {"num_records", records.size()},
                     {"num_failed", failed},
                     {"retries", setup.client->retries()}};

    MetricsReport report;
    if (sub) {
      std::map<std::string, ClassIndex> gold;
      for (const auto& inst : run.test.instances) gold[inst.id] = *inst.gold_label;
      ConfusionMatrix cm(names.size());
      for (const auto& r : records) {
        if (r.ok()) cm.add(gold.at(r.instance_id), *r.label);
      }
      report = make_report(cm, names);
      if (failed) report.flags.push_back("llm_failures_excluded:" + std::to_string(failed));
    } else {
      const auto kept = filter_records(records, llm.mode, llm.threshold);
      std::vector<std::pair<std::string, ClassIndex>> all_ok;
      for (const auto& r : records) {
        if (r.ok()) all_ok.emplace_back(r.instance_id, *r.label);
      }
      const auto model = train_slm_on_pseudo_labels(kept, run.sample.pool, run.sample.labeled,
                                                    classifier_factory(config, run.seeds),
                                                    run.validation ? &*run.validation : nullptr);
      write_text(dir / "model.json", model->serialize());
      report = evaluate(*model, run.test);
      if (!kept.empty()) report.labeling_accuracy = labeling_accuracy(kept, run.sample.shadow_gold);
      llm_info["num_added"] = kept.size();
      if (llm.threshold) llm_info["threshold"] = *llm.threshold;
      if (!all_ok.empty()) llm_info["labeling_accuracy_all"] = labeling_accuracy(all_ok, run.sample.shadow_gold);
    }
    auto metrics = to_json(report, names);
    metrics["llm"] = llm_info;
    write_json(dir / "metrics.json", metrics);
    log_to(options.log, "seed " + std::to_string(seed) + ": macro_f1=" + fmt(report.macro_f1) + ", " +
                            std::to_string(failed) + " failed of " + std::to_string(records.size()));
    RunSummary s{seed, report.accuracy, report.macro_f1};
    if (llm_info.contains("num_added")) s.extra["num_added"] = llm_info["num_added"];
    runs.push_back(std::move(s));
  }
  return finish(out, "llm-label", runs);
}

json cmd_evaluate(const fs::path& model_path, const fs::path& data_path, DataFormat format,
                  const std::vector<std::string>& class_names, const std::optional<fs::path>& out) {
  if (!fs::is_regular_file(model_path)) throw ConfigError("model file not found: " + model_path.string());
  if (!fs::is_regular_file(data_path)) throw ConfigError("dataset file not found: " + data_path.string());
  const auto model = BaselineClassifier::load(model_path);
  if (model.num_classes() != class_names.size()) {
    throw ConfigError("model has " + std::to_string(model.num_classes()) + " classes but " +
                      std::to_string(class_names.size()) + " class names were given");
  }
  const auto data = load_dataset(data_path, format, class_names);
  const auto metrics = to_json(evaluate(model, data), class_names);
  if (out) {
    std::error_code ec;
    fs::create_directories(*out, ec);
    if (ec) throw IoError("cannot create output directory '" + out->string() + "': " + ec.message());
    write_json(*out / "metrics.json", metrics);
  }
  return metrics;
}

json cmd_synth(const SynthCommand& command, const fs::path& out_dir) {
  if (command.n_per_class == 0 || command.test_per_class == 0) {
    throw ConfigError("synth: per-class counts must be positive");
  }
  const auto vocab = make_vocabulary(command.class_names.size(), command.words_per_class,
                                     derive_seed(command.seed, "vocab"));
  SynthSpec spec;
  spec.vocab_per_class = vocab;
  spec.class_names = command.class_names;
  spec.noise = command.noise;
  spec.priors = command.priors;
  spec.n_per_class = command.n_per_class;
  spec.seed = derive_seed(command.seed, "train");
  const auto train = synth_generate(spec);
  spec.n_per_class = command.test_per_class;
  spec.seed = derive_seed(command.seed, "test");
  auto test = synth_generate(spec);
  for (auto& inst : test.instances) inst.id = "test-" + inst.id.substr(inst.id.find('-') + 1);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());
  save_jsonl(out_dir / "train.jsonl", train);
  save_jsonl(out_dir / "test.jsonl", test);
  json info = {{"n_per_class", command.n_per_class},
               {"test_per_class", command.test_per_class},
               {"words_per_class", command.words_per_class},
               {"noise", command.noise},
               {"seed", command.seed},
               {"priors", command.priors},
               {"class_names", command.class_names},
               {"train_size", train.size()},
               {"test_size", test.size()}};
  write_json(out_dir / "synth.json", info);
  info["output_dir"] = out_dir.string();
  return info;
}

// ---------------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out.flush()) throw IoError("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string seed_dir_name(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

}  // namespace selftrain
