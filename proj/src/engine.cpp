#include "engine.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace selftrain {

namespace {

using nlohmann::json;

std::vector<TrainRecord> gold_records(const Dataset& dataset) {
  std::vector<TrainRecord> out;
  out.reserve(dataset.size());
  for (const auto& inst : dataset.instances) {
    if (!inst.gold_label) {
      throw DataError(DataErrorCode::MissingLabel, "instance '" + inst.id + "' has no gold label");
    }
    out.push_back(TrainRecord{inst.id, inst.text, TrainTarget::hard(*inst.gold_label)});
  }
  return out;
}

void require_all_classes(const Dataset& labeled) {
  const auto counts = labeled.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw DataError(DataErrorCode::InsufficientClassCount,
                      "labeled set has no instance of class '" + labeled.class_names[c] + "'");
    }
  }
}

std::unique_ptr<TextClassifier> fit_fresh(const EngineConfig& config,
                                          const std::vector<TrainRecord>& train,
                                          const std::vector<TrainRecord>& validation) {
  if (!config.make_classifier) throw InvalidArgument("engine config has no classifier factory");
  auto model = config.make_classifier();
  model->fit(train, validation);
  return model;
}

double validation_score(const TextClassifier& model, const Dataset& validation) {
  return evaluate(model, validation).macro_f1;
}

std::optional<double> score_pseudo_labels(const std::vector<std::pair<std::string, ClassIndex>>& selected,
                                          const ShadowGold* shadow) {
  if (!shadow || selected.empty()) return std::nullopt;
  for (const auto& [id, _] : selected) {
    if (!shadow->find(id)) return std::nullopt;
  }
  return labeling_accuracy(selected, *shadow);
}

}  // namespace

void TerminationRule::validate() const {
  if (!no_more_selectable && !max_iterations && !patience) {
    throw InvalidArgument("termination rule must enable at least one criterion");
  }
  if (max_iterations && *max_iterations == 0) throw InvalidArgument("max_iterations must be positive");
  if (patience && *patience == 0) throw InvalidArgument("patience must be positive");
}

TerminationRule termination_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("termination block must be an object");
  const std::set<std::string> allowed = {"no_more_selectable", "max_iterations", "patience"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw InvalidArgument("unknown termination key '" + key + "'");
  }
  TerminationRule r;
  r.no_more_selectable = j.value("no_more_selectable", true);
  if (j.contains("max_iterations")) {
    r.max_iterations = j.at("max_iterations").is_null()
                           ? std::nullopt
                           : std::optional<std::size_t>(j.at("max_iterations").get<std::size_t>());
  }
  if (j.contains("patience")) {
    r.patience = j.at("patience").is_null() ? std::nullopt
                                            : std::optional<std::size_t>(j.at("patience").get<std::size_t>());
  }
  r.validate();
  return r;
}

json to_json(const TerminationRule& rule) {
  return {{"no_more_selectable", rule.no_more_selectable},
          {"max_iterations", rule.max_iterations ? json(*rule.max_iterations) : json(nullptr)},
          {"patience", rule.patience ? json(*rule.patience) : json(nullptr)}};
}

json to_json(const IterationRecord& r) {
  json selected = json::array();
  for (const auto& [id, label] : r.selected) selected.push_back(json::array({id, label}));
  return {{"iteration", r.iteration},
          {"num_selected", r.num_selected},
          {"pseudo_label_accuracy", r.pseudo_label_accuracy ? json(*r.pseudo_label_accuracy) : json(nullptr)},
          {"validation_metric", r.validation_metric ? json(*r.validation_metric) : json(nullptr)},
          {"labeled_size_after", r.labeled_size_after},
          {"pool_size_after", r.pool_size_after},
          {"soft", r.soft},
          {"selected", std::move(selected)}};
}

std::unique_ptr<TextClassifier> run_supervised(const Dataset& labeled, const EngineConfig& config) {
  if (labeled.instances.empty()) throw DataError(DataErrorCode::TooSmall, "labeled set is empty");
  require_all_classes(labeled);
  const auto validation = config.validation ? gold_records(*config.validation) : std::vector<TrainRecord>{};
  return fit_fresh(config, gold_records(labeled), validation);
}

SelfTrainResult run_self_training(const Dataset& labeled, const Dataset& unlabeled,
                                  const SelectionStrategy& strategy, const TerminationRule& termination,
                                  const EngineConfig& config, const IterationObserver& observer) {
  strategy.validate();
  termination.validate();
  if (labeled.instances.empty()) throw DataError(DataErrorCode::TooSmall, "labeled set is empty");
  require_all_classes(labeled);
  {
    std::set<std::string> ids;
    for (const auto& inst : labeled.instances) ids.insert(inst.id);
    for (const auto& inst : unlabeled.instances) {
      if (!ids.insert(inst.id).second) {
        throw DataError(DataErrorCode::DuplicateId,
                        "instance '" + inst.id + "' appears in both labeled and unlabeled sets");
      }
    }
  }

  const bool soft = strategy.is_soft();
  std::optional<std::size_t> max_iterations = termination.max_iterations;
  if (soft && !max_iterations) max_iterations = kDefaultSoftIterations;
  const bool use_patience = termination.patience && config.validation && !config.validation->instances.empty();

  SelfTrainState state;
  for (const auto& inst : labeled.instances) {
    state.labeled.push_back(LabeledItem{inst, TrainTarget::hard(*inst.gold_label)});
  }
  for (const auto& inst : unlabeled.instances) {
    state.unlabeled.push_back(Instance{inst.id, inst.text, std::nullopt});
  }
  std::sort(state.unlabeled.begin(), state.unlabeled.end(),
            [](const Instance& a, const Instance& b) { return a.id < b.id; });

  const auto validation_records =
      config.validation ? gold_records(*config.validation) : std::vector<TrainRecord>{};
  const auto training_records = [&] {
    std::vector<TrainRecord> out;
    out.reserve(state.labeled.size() + state.soft_targets.size());
    for (const auto& item : state.labeled) out.push_back({item.instance.id, item.instance.text, item.target});
    for (const auto& item : state.soft_targets) out.push_back({item.instance.id, item.instance.text, item.target});
    return out;
  };

  SelfTrainResult result;
  std::shared_ptr<TextClassifier> model;
  try {
    model = fit_fresh(config, training_records(), validation_records);
  } catch (const Error& e) {
    throw SelfTrainAborted(std::string("initial training failed: ") + e.what(), {});
  }
  if (observer) observer(state, *model);

  std::optional<double> best_score;
  std::size_t since_best = 0;
  std::shared_ptr<TextClassifier> best_model = model;
  std::size_t best_iteration = 0;
  if (use_patience) best_score = validation_score(*model, *config.validation);

  std::string stop_reason;
  while (true) {
    if (max_iterations && state.iteration >= *max_iterations) {
      stop_reason = "max_iterations";
      break;
    }
    if (state.unlabeled.empty() && termination.no_more_selectable) {
      stop_reason = "no_more_selectable";
      break;
    }
    ++state.iteration;

    std::vector<Prediction> predictions;
    predictions.reserve(state.unlabeled.size());
    for (const auto& inst : state.unlabeled) {
      predictions.push_back(Prediction::from(inst.id, model->predict_dist(inst.text)));
    }
    const auto selection = select(strategy, predictions, derive_seed(config.strategy_seed, state.iteration));

    IterationRecord record;
    record.iteration = state.iteration;
    record.num_selected = selection.size();
    record.soft = soft;

    if (selection.empty()) {
      record.labeled_size_after = state.labeled.size();
      record.pool_size_after = state.unlabeled.size();
      state.history.push_back(record);
      if (observer) observer(state, *model);
      if (termination.no_more_selectable) {
        stop_reason = "no_more_selectable";
        break;
      }
    } else {
      if (soft) {
        std::map<std::string, const Instance*> by_id;
        for (const auto& inst : state.unlabeled) by_id.emplace(inst.id, &inst);
        state.soft_targets.clear();
        std::vector<std::pair<std::string, ClassIndex>> argmax_labels;
        for (const auto& [id, dist] : selection.soft_selected) {
          state.soft_targets.push_back(LabeledItem{*by_id.at(id), TrainTarget::soft(dist)});
          argmax_labels.emplace_back(id, argmax(dist));
        }
        record.pseudo_label_accuracy = score_pseudo_labels(argmax_labels, config.shadow_gold);
      } else {
        std::set<std::string> chosen;
        for (const auto& [id, _] : selection.hard_selected) chosen.insert(id);
        auto label_it = selection.hard_selected.begin();
        std::vector<Instance> remaining;
        remaining.reserve(state.unlabeled.size() - chosen.size());
        // Pool and selection are both id-ordered.
        for (auto& inst : state.unlabeled) {
          if (label_it != selection.hard_selected.end() && label_it->first == inst.id) {
            state.labeled.push_back(LabeledItem{inst, TrainTarget::hard(label_it->second)});
            ++label_it;
          } else {
            remaining.push_back(std::move(inst));
          }
        }
        state.unlabeled = std::move(remaining);
        record.selected = selection.hard_selected;
        record.pseudo_label_accuracy = score_pseudo_labels(record.selected, config.shadow_gold);
      }

      try {
        model = fit_fresh(config, training_records(), validation_records);
      } catch (const Error& e) {
        record.labeled_size_after = state.labeled.size();
        record.pool_size_after = state.unlabeled.size();
        state.history.push_back(record);
        throw SelfTrainAborted("retraining failed at iteration " + std::to_string(state.iteration) + ": " +
                                   e.what(),
                               state.history);
      }
      record.labeled_size_after = state.labeled.size();
      record.pool_size_after = state.unlabeled.size();
      if (use_patience) record.validation_metric = validation_score(*model, *config.validation);
      state.history.push_back(record);
      if (observer) observer(state, *model);
    }

    if (use_patience) {
      if (record.validation_metric && *record.validation_metric > *best_score) {
        best_score = record.validation_metric;
        best_model = model;
        best_iteration = state.iteration;
        since_best = 0;
      } else if (++since_best >= *termination.patience) {
        stop_reason = "patience";
        break;
      }
    }
  }

  if (use_patience) {
    result.model = best_model;
    result.model_iteration = best_iteration;
  } else {
    result.model = model;
    result.model_iteration = state.iteration;
  }
  result.history = std::move(state.history);
  result.stop_reason = stop_reason;
  result.final_labeled_size = state.labeled.size();
  return result;
}

MetricsReport evaluate(const TextClassifier& model, const Dataset& test) {
  const auto gold = test.gold_labels();
  std::vector<ClassIndex> predicted;
  predicted.reserve(test.size());
  for (const auto& inst : test.instances) predicted.push_back(model.predict_label(inst.text));
  return make_report(confusion(gold, predicted, test.num_classes()), test.class_names);
}

}  // namespace selftrain
