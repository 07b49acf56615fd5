#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "classifier.hpp"
#include "data.hpp"
#include "engine.hpp"
#include "llm.hpp"
#include "strategies.hpp"

namespace selftrain {

namespace fs = std::filesystem;

struct DataConfig {
  fs::path train;
  std::optional<fs::path> test;  // absent: carve test_fraction from train
  DataFormat format = DataFormat::Jsonl;
  std::vector<std::string> class_names = default_class_names();
};

struct SplitConfig {
  double test_fraction = 0.2;
  // Carved from the training split before n-shot sampling; 0 disables patience.
  double validation_fraction = 0.1;
};

struct LlmConfig {
  LlmMode mode = LlmMode::Obj;
  std::optional<double> threshold;  // obj-conf-score only
  std::size_t n_shot = 0;           // in-prompt examples per class
  std::optional<std::string> endpoint;
  std::optional<fs::path> fixtures;
  std::string model;
  double temperature = 0.0;
  std::size_t timeout_ms = 30000;
  std::size_t max_retries = 3;
  std::size_t max_in_flight = 4;
  std::string auth_env = "LLM_API_KEY";
  std::size_t base_delay_ms = 200;
  std::size_t max_delay_ms = 5000;
  double failure_limit = 0.10;
  std::optional<fs::path> prompt_template;
  std::optional<std::size_t> max_prompt_chars;
};

struct ExperimentConfig {
  DataConfig data;
  SplitConfig split;
  std::size_t n_shot = 20;
  std::vector<std::uint64_t> seeds = {0};
  SelectionStrategy strategy{ConfThreshold{0.9}};
  TerminationRule termination;
  BaselineConfig classifier;
  std::optional<LlmConfig> llm;
  fs::path output_dir = "runs";
};

/// Strict parse: unknown keys and out-of-range values raise ConfigError.
/// Relative paths resolve against base_dir.
ExperimentConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir);
ExperimentConfig load_config(const fs::path& path);
/// Fully materialized form (every default written out, absolute paths).
nlohmann::json to_json(const ExperimentConfig& config);

/// Everything a single seeded run consumes. Seeds for every random step are
/// children of the run's root seed.
struct SeedPlan {
  std::uint64_t root = 0;
  std::uint64_t split = 0;
  std::uint64_t validation = 0;
  std::uint64_t shot = 0;
  std::uint64_t train = 0;
  std::uint64_t strategy = 0;
  std::uint64_t llm = 0;

  static SeedPlan from_root(std::uint64_t root);
  nlohmann::json to_json() const;
};

struct PreparedRun {
  SeedPlan seeds;
  Dataset test;
  std::optional<Dataset> validation;
  NShotSample sample;
};

struct Corpora {
  Dataset train;
  std::optional<Dataset> test;
};

Corpora load_corpora(const ExperimentConfig& config);
PreparedRun prepare_run(const ExperimentConfig& config, const Corpora& corpora, std::uint64_t root_seed,
                        std::size_t n_shot);

ClassifierFactory classifier_factory(const ExperimentConfig& config, const SeedPlan& seeds);
EngineConfig engine_config(const ExperimentConfig& config, const PreparedRun& run);

struct LlmSetup {
  std::unique_ptr<LlmClient> client;
  PromptTemplate prompt;
  LabelingOptions options;
};

/// Builds the client (fixtures or endpoint, exactly one) and prompt template.
LlmSetup make_llm(const LlmConfig& llm, std::uint64_t jitter_seed);

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts below the output directory and returns a
// short JSON summary.

using Logger = std::function<void(const std::string&)>;

struct RunOptions {
  std::optional<std::uint64_t> seed;  // replaces the configured seed list
  std::optional<fs::path> out;        // replaces output_dir
  Logger log;
};

struct LlmOverrides {
  std::optional<LlmMode> mode;
  std::optional<double> threshold;
  std::optional<std::size_t> n_shot;
  std::optional<fs::path> fixtures;
  std::optional<std::string> endpoint;
};

/// Applies --seed / --out to a loaded config.
ExperimentConfig apply_options(ExperimentConfig config, const RunOptions& options);

nlohmann::json cmd_train(const ExperimentConfig& config, const RunOptions& options = {});
nlohmann::json cmd_selftrain(const ExperimentConfig& config, const RunOptions& options = {});
nlohmann::json cmd_llm_label(const ExperimentConfig& config, const LlmOverrides& overrides,
                             const RunOptions& options = {});
nlohmann::json cmd_evaluate(const fs::path& model_path, const fs::path& data_path, DataFormat format,
                            const std::vector<std::string>& class_names, const std::optional<fs::path>& out);

struct SynthCommand {
  std::size_t n_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t words_per_class = 300;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::vector<double> priors;  // empty: generator default
  std::vector<std::string> class_names = default_class_names();
};

/// Writes train.jsonl and test.jsonl sharing one vocabulary.
nlohmann::json cmd_synth(const SynthCommand& command, const fs::path& out_dir);

// Shared helpers
void write_text(const fs::path& path, const std::string& content);
void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);
std::string seed_dir_name(std::uint64_t seed);

}  // namespace selftrain
