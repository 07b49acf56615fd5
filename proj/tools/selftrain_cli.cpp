#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "selftrain/selftrain.h"

namespace {

void log_stderr(const char* message, void*) { std::fprintf(stderr, "[selftrain] %s\n", message); }

int finish(st_status status, char*& summary) {
  if (status != ST_OK) {
    std::fprintf(stderr, "error (%s): %s\n", st_status_name(status), st_last_error());
    return static_cast<int>(status);
  }
  if (summary) {
    std::printf("%s\n", summary);
    st_string_free(summary);
    summary = nullptr;
  }
  return 0;
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
  std::vector<const char*> out;
  for (const auto& s : v) out.push_back(s.c_str());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training and LLM pseudo-labeling for few-shot text classification"};
  app.set_version_flag("--version", std::string(st_version()));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool verbose = false;
  app.add_option("--config", config_path, "Experiment config (JSON)");
  app.add_option("--seed", seed, "Run a single root seed instead of the configured list");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");

  auto* train = app.add_subcommand("train", "Supervised baseline on the n-shot labeled set");
  auto* selftrain = app.add_subcommand("selftrain", "Iterative pseudo-labeling");

  auto* llm = app.add_subcommand("llm-label", "LLM as classifier (sub) or pseudo-labeler (obj modes)");
  std::string mode;
  std::optional<double> threshold;
  std::optional<std::size_t> llm_n_shot;
  std::string fixtures, endpoint;
  llm->add_option("--mode", mode, "sub | obj | obj-conf | obj-conf-score");
  llm->add_option("--threshold", threshold, "Score threshold for obj-conf-score (strictly greater is kept)");
  llm->add_option("--n-shot", llm_n_shot, "In-prompt examples per class");
  auto* fx = llm->add_option("--fixtures", fixtures, "Replay a JSONL fixture instead of calling an endpoint");
  llm->add_option("--endpoint", endpoint, "Chat-completion URL")->excludes(fx);

  auto* evaluate = app.add_subcommand("evaluate", "Score a saved model on a labeled dataset");
  std::string model_path, data_path, format = "jsonl";
  std::vector<std::string> classes;
  evaluate->add_option("--model", model_path, "Model artifact")->required();
  evaluate->add_option("--data", data_path, "Labeled dataset")->required();
  evaluate->add_option("--format", format, "jsonl | csv");
  evaluate->add_option("--classes", classes, "Class names in index order")->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "Grid of independent runs along one axis");
  std::string axis;
  std::vector<double> grid;
  std::vector<std::uint64_t> seeds;
  std::size_t parallel = 1;
  sweep->add_option("--axis", axis, "conf_threshold | ent_threshold | score_threshold | n_shot")->required();
  sweep->add_option("--grid", grid, "Comma-separated values (default grid per axis)")->delimiter(',');
  sweep->add_option("--seeds", seeds, "Comma-separated root seeds")->delimiter(',');
  sweep->add_option("--parallel", parallel, "Cells run concurrently");

  auto* report = app.add_subcommand("report", "Re-render report files from sweep.json");
  std::string sweep_json;
  report->add_option("--input", sweep_json, "sweep.json of an earlier sweep")->required();

  auto* synth = app.add_subcommand("synth", "Write a synthetic bag-of-words corpus");
  st_synth_options synth_opts;
  st_synth_options_default(&synth_opts);
  std::vector<double> priors;
  synth->add_option("--n-per-class", synth_opts.n_per_class, "Training instances per class (before priors)");
  synth->add_option("--test-per-class", synth_opts.test_per_class, "Test instances per class (before priors)");
  synth->add_option("--words-per-class", synth_opts.words_per_class, "Vocabulary size per class");
  synth->add_option("--noise", synth_opts.noise, "Fraction of words drawn from other classes");
  synth->add_option("--priors", priors, "Class priors")->delimiter(',');
  synth->add_option("--classes", classes, "Class names")->delimiter(',');

  for (auto* sub : {train, selftrain, llm, evaluate, sweep, report, synth}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ST_ERR_INVALID_ARGUMENT);
  }

  st_run_options run{};
  run.config_path = config_path.empty() ? nullptr : config_path.c_str();
  run.has_seed = seed.has_value();
  run.seed = seed.value_or(0);
  run.out_dir = out_dir.empty() ? nullptr : out_dir.c_str();
  run.log = verbose ? log_stderr : nullptr;

  const bool needs_config = train->parsed() || selftrain->parsed() || llm->parsed() || sweep->parsed();
  if (needs_config && config_path.empty()) {
    std::fprintf(stderr, "error (config): --config is required for %s\n",
                 app.get_subcommands().front()->get_name().c_str());
    return static_cast<int>(ST_ERR_CONFIG);
  }

  char* summary = nullptr;
  if (train->parsed()) return finish(st_cmd_train(&run, &summary), summary);
  if (selftrain->parsed()) return finish(st_cmd_selftrain(&run, &summary), summary);
  if (llm->parsed()) {
    st_llm_options o{};
    o.mode = mode.empty() ? nullptr : mode.c_str();
    o.has_threshold = threshold.has_value();
    o.threshold = threshold.value_or(0.0);
    o.has_n_shot = llm_n_shot.has_value();
    o.n_shot = llm_n_shot.value_or(0);
    o.fixtures = fixtures.empty() ? nullptr : fixtures.c_str();
    o.endpoint = endpoint.empty() ? nullptr : endpoint.c_str();
    return finish(st_cmd_llm_label(&run, &o, &summary), summary);
  }
  if (evaluate->parsed()) {
    const auto names = c_strings(classes);
    return finish(st_cmd_evaluate(model_path.c_str(), data_path.c_str(), format.c_str(),
                                  classes.empty() ? nullptr : names.data(), names.size(),
                                  out_dir.empty() ? nullptr : out_dir.c_str(), &summary),
                  summary);
  }
  if (sweep->parsed()) {
    st_sweep_options o{};
    o.axis = axis.c_str();
    o.grid = grid.empty() ? nullptr : grid.data();
    o.grid_size = grid.size();
    o.seeds = seeds.empty() ? nullptr : seeds.data();
    o.num_seeds = seeds.size();
    o.parallel = parallel;
    return finish(st_cmd_sweep(&run, &o, &summary), summary);
  }
  if (report->parsed()) {
    const std::string dir = out_dir.empty() ? std::string(".") : out_dir;
    return finish(st_cmd_report(sweep_json.c_str(), dir.c_str(), &summary), summary);
  }
  if (synth->parsed()) {
    if (out_dir.empty()) {
      std::fprintf(stderr, "error (config): synth needs --out\n");
      return static_cast<int>(ST_ERR_CONFIG);
    }
    synth_opts.seed = seed.value_or(0);
    synth_opts.priors = priors.empty() ? nullptr : priors.data();
    synth_opts.num_priors = priors.size();
    const auto names = c_strings(classes);
    synth_opts.class_names = classes.empty() ? nullptr : names.data();
    synth_opts.num_classes = names.size();
    return finish(st_cmd_synth(&synth_opts, out_dir.c_str(), &summary), summary);
  }
  return static_cast<int>(ST_ERR_INVALID_ARGUMENT);
}
