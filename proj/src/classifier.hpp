#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "common.hpp"

namespace selftrain {

/// Probability vector over C classes. Entries are non-negative and sum to 1.
class ProbDist {
 public:
  ProbDist() = default;

  /// Validates non-negativity and normalization (tolerance 1e-9).
  static ProbDist checked(std::vector<double> probs);
  /// Trusted construction for values produced by softmax.
  static ProbDist unchecked(std::vector<double> probs) { return ProbDist(std::move(probs)); }
  static ProbDist uniform(std::size_t num_classes);
  static ProbDist one_hot(std::size_t num_classes, ClassIndex label);

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& values() const noexcept { return probs_; }

  bool operator==(const ProbDist&) const = default;

 private:
  explicit ProbDist(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::vector<double> probs_;
};

/// Index of the largest entry; lowest index wins ties.
ClassIndex argmax(const ProbDist& dist);

/// Numerically stable softmax (max-subtracted).
ProbDist softmax(std::span<const double> logits);

/// Sparse features: (index, weight) sorted by index, no duplicate indices.
struct FeatureVector {
  std::vector<std::pair<std::uint32_t, double>> entries;

  double weight(std::uint32_t index) const;
  double dot(const FeatureVector& other) const;
};

/// Version tag of the tokenizer + hash scheme, stored in model artifacts.
inline constexpr int kHashVersion = 1;

/// Lowercased ASCII alphanumerics (bytes >= 0x80 kept as word characters).
std::vector<std::string> tokenize(std::string_view text);

/// Unigrams ("u:" prefix) and adjacent-token bigrams ("b:" prefix), hashed with
/// 64-bit FNV-1a modulo dim. Colliding features accumulate.
FeatureVector featurize(std::string_view text, std::uint32_t dim);

struct TrainTarget {
  std::variant<ClassIndex, ProbDist> value;

  static TrainTarget hard(ClassIndex label) { return TrainTarget{label}; }
  static TrainTarget soft(ProbDist dist) { return TrainTarget{std::move(dist)}; }
  bool is_soft() const noexcept { return std::holds_alternative<ProbDist>(value); }
};

struct TrainExample {
  FeatureVector features;
  TrainTarget target;
};

struct Hyperparams {
  double learning_rate = 0.5;  // decays as lr / sqrt(epoch)
  std::size_t max_epochs = 100;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  // Epoch-level early stopping on validation loss; 0 disables.
  std::size_t inner_patience = 2;
};

class ClassifierModel {
 public:
  ClassifierModel(std::size_t num_classes, std::uint32_t dim, Hyperparams hyperparams = {});

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::uint32_t dim() const noexcept { return dim_; }
  const Hyperparams& hyperparams() const noexcept { return hyperparams_; }

  /// Row-major by feature: weight(f, c) = weights()[f * C + c].
  std::vector<double>& weights() noexcept { return weights_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  std::vector<double>& bias() noexcept { return bias_; }
  const std::vector<double>& bias() const noexcept { return bias_; }

  std::vector<double> logits(const FeatureVector& x) const;
  ProbDist predict_dist(const FeatureVector& x) const;
  ClassIndex predict_label(const FeatureVector& x) const { return argmax(predict_dist(x)); }

  nlohmann::json to_json() const;
  static ClassifierModel from_json(const nlohmann::json& j);

  bool operator==(const ClassifierModel&) const = default;

 private:
  std::size_t num_classes_;
  std::uint32_t dim_;
  Hyperparams hyperparams_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

/// Hard target y: -log p_y. Soft target q: KL(q || p) = sum_c q_c log(q_c / p_c).
double example_loss(const ClassifierModel& model, const TrainExample& example);

/// Mean example loss plus (l2 / 2) * ||W||^2 (bias unregularized).
double objective(const ClassifierModel& model, std::span<const TrainExample> examples, double l2);

struct ModelGradient {
  std::vector<double> weights;
  std::vector<double> bias;
};

/// Analytic gradient of objective(). Both losses share d/dlogits = p - target.
ModelGradient objective_gradient(const ClassifierModel& model,
                                 std::span<const TrainExample> examples, double l2);

struct TrainLog {
  std::vector<double> epoch_loss;        // training objective after each epoch
  std::vector<double> validation_loss;   // empty without validation data
  std::size_t best_epoch = 0;
};

/// SGD over a seeded per-epoch permutation. With validation data and
/// inner_patience > 0, stops after that many epochs without improvement and
/// returns the best-validation parameters.
ClassifierModel train(std::span<const TrainExample> examples, std::size_t num_classes,
                      std::uint32_t dim, const Hyperparams& hyperparams,
                      std::span<const TrainExample> validation = {}, TrainLog* log = nullptr);

// ---------------------------------------------------------------------------
// Backend-neutral interface used by the engine and the LLM pipeline.

struct TrainRecord {
  std::string id;
  std::string text;
  TrainTarget target;
};

class TextClassifier {
 public:
  virtual ~TextClassifier() = default;

  virtual std::size_t num_classes() const = 0;
  /// Trains from a fresh initialization; any previous state is discarded.
  virtual void fit(std::span<const TrainRecord> train, std::span<const TrainRecord> validation) = 0;
  virtual ProbDist predict_dist(std::string_view text) const = 0;
  ClassIndex predict_label(std::string_view text) const { return argmax(predict_dist(text)); }
  /// Self-describing artifact bytes.
  virtual std::string serialize() const = 0;
};

using ClassifierFactory = std::function<std::unique_ptr<TextClassifier>()>;

struct BaselineConfig {
  std::size_t num_classes = 3;
  unsigned dim_bits = 18;
  Hyperparams hyperparams;

  std::uint32_t dim() const { return std::uint32_t{1} << dim_bits; }
};

/// Hashed bag-of-words softmax regression.
class BaselineClassifier final : public TextClassifier {
 public:
  explicit BaselineClassifier(BaselineConfig config);
  explicit BaselineClassifier(ClassifierModel model);

  std::size_t num_classes() const override { return config_.num_classes; }
  void fit(std::span<const TrainRecord> train, std::span<const TrainRecord> validation) override;
  ProbDist predict_dist(std::string_view text) const override;
  std::string serialize() const override;

  const ClassifierModel& model() const;
  const TrainLog& last_log() const noexcept { return log_; }

  void save(const std::filesystem::path& path) const;
  static BaselineClassifier load(const std::filesystem::path& path);
  static BaselineClassifier deserialize(std::string_view bytes);

 private:
  BaselineConfig config_;
  std::optional<ClassifierModel> model_;
  TrainLog log_;
};

ClassifierFactory baseline_factory(BaselineConfig config);

}  // namespace selftrain
