#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "classifier.hpp"

namespace selftrain {

/// Max entry of the distribution.
double confidence(const ProbDist& dist);

/// Shannon entropy in nats, with 0 ln 0 = 0.
double entropy(const ProbDist& dist);

struct Prediction {
  std::string instance_id;
  ProbDist dist;
  ClassIndex pseudo_label = 0;
  double confidence = 0.0;
  double entropy = 0.0;

  static Prediction from(std::string instance_id, ProbDist dist);
};

struct ConfThreshold { double t; };   // keep confidence > t
struct EntThreshold { double t; };    // keep entropy < t
struct MaxConfTopK { std::size_t k; };
struct MinEntTopK { std::size_t k; };
struct SoftLabel {};
struct RandomBatch { std::size_t b; };

inline constexpr std::size_t kDefaultBatchCap = 1000;

struct SelectionStrategy {
  std::variant<ConfThreshold, EntThreshold, MaxConfTopK, MinEntTopK, SoftLabel, RandomBatch> rule;
  std::size_t batch_cap = kDefaultBatchCap;

  bool is_soft() const noexcept { return std::holds_alternative<SoftLabel>(rule); }
  /// Config name: conf_threshold, ent_threshold, max_conf, min_ent, soft_label, random.
  std::string name() const;
  /// Throws InvalidArgument when a parameter is out of range.
  void validate() const;
};

/// Parses {"name": ..., "t"|"k"|"b": ..., "batch_cap": ...}; unknown keys rejected.
SelectionStrategy strategy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SelectionStrategy& strategy);

struct SelectionResult {
  std::vector<std::pair<std::string, ClassIndex>> hard_selected;
  std::vector<std::pair<std::string, ProbDist>> soft_selected;

  std::size_t size() const noexcept { return hard_selected.size() + soft_selected.size(); }
  bool empty() const noexcept { return size() == 0; }
};

/// Applies the strategy rule, then keeps at most batch_cap survivors ranked by
/// confidence (descending). Every ranking breaks ties by ascending instance id,
/// and the result is ordered by instance id.
SelectionResult select(const SelectionStrategy& strategy, const std::vector<Prediction>& predictions,
                       std::uint64_t rng_seed);

}  // namespace selftrain
