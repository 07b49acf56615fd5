#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "classifier.hpp"
#include "data.hpp"
#include "metrics.hpp"
#include "strategies.hpp"

namespace selftrain {

struct TerminationRule {
  bool no_more_selectable = true;
  std::optional<std::size_t> max_iterations;
  // Outer-loop early stop on validation macro-F1; inert without validation data.
  std::optional<std::size_t> patience = 2;

  void validate() const;
};

TerminationRule termination_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TerminationRule& rule);

/// Iteration cap used by soft-label runs when the rule sets none.
inline constexpr std::size_t kDefaultSoftIterations = 5;

struct EngineConfig {
  ClassifierFactory make_classifier;
  std::uint64_t strategy_seed = 0;
  // Gold-labeled held-out data for patience and inner early stopping.
  const Dataset* validation = nullptr;
  // Pool gold labels; read only to score pseudo-labels.
  const ShadowGold* shadow_gold = nullptr;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t num_selected = 0;
  std::optional<double> pseudo_label_accuracy;
  std::optional<double> validation_metric;
  std::size_t labeled_size_after = 0;
  std::size_t pool_size_after = 0;
  bool soft = false;
  // Hard modes: migrated (id, pseudo-label) pairs in id order.
  std::vector<std::pair<std::string, ClassIndex>> selected;
};

nlohmann::json to_json(const IterationRecord& record);

struct LabeledItem {
  Instance instance;
  TrainTarget target;
};

struct SelfTrainState {
  std::vector<LabeledItem> labeled;
  std::vector<Instance> unlabeled;
  // Current soft targets (soft-label mode only); their instances stay pooled.
  std::vector<LabeledItem> soft_targets;
  std::size_t iteration = 0;
  std::vector<IterationRecord> history;
};

struct SelfTrainResult {
  // With validation-driven patience this is the best-validation model.
  std::shared_ptr<TextClassifier> model;
  std::vector<IterationRecord> history;
  std::string stop_reason;
  // Iteration whose model was returned (0 = initial supervised model).
  std::size_t model_iteration = 0;
  std::size_t final_labeled_size = 0;
};

/// Carries the history recorded before a classifier failure.
class SelfTrainAborted : public TrainingError {
 public:
  SelfTrainAborted(const std::string& what, std::vector<IterationRecord> history)
      : TrainingError(what), history_(std::move(history)) {}
  const std::vector<IterationRecord>& history() const noexcept { return history_; }

 private:
  std::vector<IterationRecord> history_;
};

/// Called after initialization (iteration 0) and after every iteration.
using IterationObserver = std::function<void(const SelfTrainState&, const TextClassifier&)>;

/// Supervised baseline: one training pass on the labeled set.
std::unique_ptr<TextClassifier> run_supervised(const Dataset& labeled, const EngineConfig& config);

/// Iterative pseudo-labeling. Each iteration predicts the whole pool, applies
/// the strategy, migrates hard selections into the labeled set (soft selections
/// become KL targets and stay pooled), and retrains from a fresh model.
SelfTrainResult run_self_training(const Dataset& labeled, const Dataset& unlabeled,
                                  const SelectionStrategy& strategy, const TerminationRule& termination,
                                  const EngineConfig& config, const IterationObserver& observer = {});

MetricsReport evaluate(const TextClassifier& model, const Dataset& test);

}  // namespace selftrain
