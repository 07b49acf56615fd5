#include "metrics.hpp"

#include <cmath>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "data.hpp"

namespace selftrain {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw InvalidArgument("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::vector<std::vector<std::size_t>> counts) {
  ConfusionMatrix cm(counts.size());
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g].size() != counts.size()) throw InvalidArgument("confusion matrix must be square");
    for (std::size_t p = 0; p < counts.size(); ++p) cm.counts_[g * cm.n_ + p] = counts[g][p];
  }
  return cm;
}

void ConfusionMatrix::add(ClassIndex gold, ClassIndex predicted, std::size_t count) {
  if (gold >= n_ || predicted >= n_) throw InvalidArgument("label out of range");
  counts_[gold * n_ + predicted] += count;
}

std::size_t ConfusionMatrix::total() const noexcept {
  std::size_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::size_t ConfusionMatrix::trace() const noexcept {
  std::size_t s = 0;
  for (std::size_t c = 0; c < n_; ++c) s += counts_[c * n_ + c];
  return s;
}

std::size_t ConfusionMatrix::row_sum(ClassIndex gold) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) s += at(gold, p);
  return s;
}

std::size_t ConfusionMatrix::column_sum(ClassIndex predicted) const {
  std::size_t s = 0;
  for (std::size_t g = 0; g < n_; ++g) s += at(g, predicted);
  return s;
}

ConfusionMatrix confusion(std::span<const ClassIndex> gold, std::span<const ClassIndex> predicted,
                          std::size_t num_classes) {
  if (gold.size() != predicted.size()) {
    throw InvalidArgument("gold and predicted label lists differ in length (" +
                          std::to_string(gold.size()) + " vs " + std::to_string(predicted.size()) + ")");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < gold.size(); ++i) cm.add(gold[i], predicted[i]);
  return cm;
}

std::vector<ClassScores> per_class_scores(const ConfusionMatrix& cm) {
  std::vector<ClassScores> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const std::size_t predicted = cm.column_sum(c);
    const std::size_t actual = cm.row_sum(c);
    auto& s = out[c];
    s.support = actual;
    s.precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    s.recall = actual ? tp / static_cast<double>(actual) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return out;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  return total ? static_cast<double>(cm.trace()) / static_cast<double>(total) : 0.0;
}

double macro_f1(const ConfusionMatrix& cm) {
  double s = 0.0;
  for (const auto& c : per_class_scores(cm)) s += c.f1;
  return s / static_cast<double>(cm.num_classes());
}

double micro_f1(const ConfusionMatrix& cm) { return accuracy(cm); }

MetricsReport make_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  if (class_names.size() != cm.num_classes()) throw InvalidArgument("class name count mismatch");
  MetricsReport r;
  r.matrix = cm;
  r.per_class = per_class_scores(cm);
  r.accuracy = accuracy(cm);
  r.macro_f1 = macro_f1(cm);
  r.micro_f1 = micro_f1(cm);
  r.n_evaluated = cm.total();
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const bool no_gold = cm.row_sum(c) == 0;
    const bool no_pred = cm.column_sum(c) == 0;
    if (no_gold && no_pred) r.flags.push_back("class_absent:" + class_names[c]);
    else if (no_pred) r.flags.push_back("precision_undefined:" + class_names[c]);
    else if (no_gold) r.flags.push_back("recall_undefined:" + class_names[c]);
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& report, const std::vector<std::string>& class_names) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& s = report.per_class[c];
    per_class.push_back({{"name", class_names.at(c)},
                         {"precision", s.precision},
                         {"recall", s.recall},
                         {"f1", s.f1},
                         {"support", s.support}});
  }
  nlohmann::json matrix = nlohmann::json::array();
  for (std::size_t g = 0; g < report.matrix.num_classes(); ++g) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < report.matrix.num_classes(); ++p) row.push_back(report.matrix.at(g, p));
    matrix.push_back(std::move(row));
  }
  nlohmann::json j = {{"accuracy", report.accuracy},  {"macro_f1", report.macro_f1},
                      {"micro_f1", report.micro_f1},  {"per_class", std::move(per_class)},
                      {"n", report.n_evaluated},      {"flags", report.flags},
                      {"confusion", std::move(matrix)}};
  if (report.labeling_accuracy) j["labeling_accuracy"] = *report.labeling_accuracy;
  return j;
}

double labeling_accuracy(std::span<const std::pair<std::string, ClassIndex>> records,
                         const ShadowGold& shadow_gold) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& [id, label] : records) {
    const auto gold = shadow_gold.find(id);
    if (!gold) throw LabelingError("no shadow gold label for '" + id + "'");
    if (*gold == label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(a.n);
  if (a.n < 2) return a;
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  const double sd = std::sqrt(ss / static_cast<double>(a.n - 1));
  const boost::math::students_t dist(static_cast<double>(a.n - 1));
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  a.ci95_half_width = t * sd / std::sqrt(static_cast<double>(a.n));
  return a;
}

}  // namespace selftrain
