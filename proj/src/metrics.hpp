#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "common.hpp"

namespace selftrain {

class ShadowGold;

/// Rows are gold classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  static ConfusionMatrix from_counts(std::vector<std::vector<std::size_t>> counts);

  std::size_t num_classes() const noexcept { return n_; }
  std::size_t at(ClassIndex gold, ClassIndex predicted) const { return counts_[gold * n_ + predicted]; }
  void add(ClassIndex gold, ClassIndex predicted, std::size_t count = 1);
  std::size_t total() const noexcept;
  std::size_t trace() const noexcept;
  std::size_t row_sum(ClassIndex gold) const;
  std::size_t column_sum(ClassIndex predicted) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion(std::span<const ClassIndex> gold, std::span<const ClassIndex> predicted,
                          std::size_t num_classes);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

/// Per-class scores; empty denominators yield 0.
std::vector<ClassScores> per_class_scores(const ConfusionMatrix& cm);

double accuracy(const ConfusionMatrix& cm);
/// Unweighted mean of per-class F1.
double macro_f1(const ConfusionMatrix& cm);
/// Pooled F1 over all classes; equals accuracy for single-label data.
double micro_f1(const ConfusionMatrix& cm);

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::vector<ClassScores> per_class;
  std::size_t n_evaluated = 0;
  std::optional<double> labeling_accuracy;
  std::vector<std::string> flags;  // zero-division and absent-class notes
  ConfusionMatrix matrix{2};
};

MetricsReport make_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

/// metrics.json: {accuracy, macro_f1, micro_f1, per_class:[{name,precision,recall,f1,support}],
/// n, flags, confusion, labeling_accuracy?}.
nlohmann::json to_json(const MetricsReport& report, const std::vector<std::string>& class_names);

class LabelingError : public Error {
 public:
  explicit LabelingError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// Fraction of (id, label) pairs matching the shadow gold label. Throws
/// LabelingError when an id has no shadow label. Empty input yields 0.
double labeling_accuracy(std::span<const std::pair<std::string, ClassIndex>> records,
                         const ShadowGold& shadow_gold);

struct Aggregate {
  double mean = 0.0;
  double ci95_half_width = 0.0;  // Student t; 0 for a single value
  std::size_t n = 0;
};

Aggregate aggregate(std::span<const double> values);

}  // namespace selftrain
