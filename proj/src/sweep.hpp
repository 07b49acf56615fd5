#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "experiment.hpp"

namespace selftrain {

enum class SweepAxis { ConfThreshold, EntThreshold, ScoreThreshold, NShot };

SweepAxis parse_axis(std::string_view name);
const char* to_string(SweepAxis axis);
/// conf/score thresholds 0.5..0.95 step 0.05, n-shot {5..30 step 5}; none for entropy.
std::vector<double> default_grid(SweepAxis axis);

struct SweepSpec {
  SweepAxis axis = SweepAxis::ConfThreshold;
  std::vector<double> grid;          // strictly monotone
  std::vector<std::uint64_t> seeds;  // empty: the config's seeds
  std::size_t parallel = 1;          // cells run concurrently

  void validate() const;
};

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  std::size_t num_added = 0;
  std::optional<double> pseudo_label_accuracy;
  std::optional<double> test_metric;      // macro-F1 on the test split
  std::optional<double> baseline_metric;  // supervised model of the same seed
  std::string error;                      // non-empty for a failed cell
};

struct SweepAggregate {
  double value = 0.0;
  std::size_t n_ok = 0;
  Aggregate num_added;
  std::optional<Aggregate> pseudo_label_accuracy;
  std::optional<Aggregate> test_metric;
};

struct SweepTable {
  SweepAxis axis = SweepAxis::ConfThreshold;
  std::vector<double> grid;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepRow> rows;  // grid-major, seeds in order
};

/// Seed of one cell, a function of (seed, axis value, seed index) only.
std::uint64_t cell_seed(std::uint64_t seed, double value, std::size_t seed_index);

/// One row per (grid value, seed). Cells that throw become error rows.
SweepTable run_sweep(const ExperimentConfig& config, const SweepSpec& spec, const Logger& log = {});

std::vector<SweepAggregate> aggregate_rows(const SweepTable& table);

nlohmann::json to_json(const SweepTable& table);
SweepTable sweep_from_json(const nlohmann::json& j);

/// Writes sweep.tsv, sweep.json and plotdata.json into out_dir.
void render_report(const SweepTable& table, const std::filesystem::path& out_dir);

nlohmann::json cmd_sweep(const ExperimentConfig& config, const SweepSpec& spec, const RunOptions& options = {});
/// Re-renders the report files from an existing sweep.json.
nlohmann::json cmd_report(const std::filesystem::path& sweep_json, const std::filesystem::path& out_dir);

}  // namespace selftrain
