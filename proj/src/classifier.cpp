#include "classifier.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace selftrain {

namespace {

using nlohmann::json;

constexpr const char* kModelFormat = "selftrain-baseline-model";
constexpr int kModelFormatVersion = 1;

double log_sum_exp(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - m);
  return m + std::log(s);
}

// d(loss)/d(logits) = p - target, for both target kinds.
void logit_residual(const ProbDist& p, const TrainTarget& target, std::vector<double>& out) {
  out.assign(p.values().begin(), p.values().end());
  if (const auto* label = std::get_if<ClassIndex>(&target.value)) {
    out[*label] -= 1.0;
  } else {
    const auto& q = std::get<ProbDist>(target.value);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] -= q[c];
  }
}

void check_example(const TrainExample& ex, std::size_t num_classes, std::uint32_t dim) {
  if (const auto* label = std::get_if<ClassIndex>(&ex.target.value)) {
    if (*label >= num_classes) throw TrainingError("hard target out of range");
  } else if (std::get<ProbDist>(ex.target.value).size() != num_classes) {
    throw TrainingError("soft target has wrong number of classes");
  }
  for (const auto& [f, w] : ex.features.entries) {
    if (f >= dim) throw TrainingError("feature index out of range");
    if (!std::isfinite(w)) throw TrainingError("non-finite feature weight");
  }
}

double mean_loss(const ClassifierModel& model, std::span<const TrainExample> examples) {
  double total = 0.0;
  for (const auto& ex : examples) total += example_loss(model, ex);
  return total / static_cast<double>(examples.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// ProbDist

ProbDist ProbDist::checked(std::vector<double> probs) {
  if (probs.empty()) throw InvalidArgument("empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("probabilities must be finite and >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("probabilities must sum to 1");
  return ProbDist(std::move(probs));
}

ProbDist ProbDist::uniform(std::size_t num_classes) {
  return ProbDist(std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes)));
}

ProbDist ProbDist::one_hot(std::size_t num_classes, ClassIndex label) {
  std::vector<double> p(num_classes, 0.0);
  p.at(label) = 1.0;
  return ProbDist(std::move(p));
}

ClassIndex argmax(const ProbDist& dist) {
  ClassIndex best = 0;
  for (ClassIndex c = 1; c < dist.size(); ++c) {
    if (dist[c] > dist[best]) best = c;
  }
  return best;
}

ProbDist softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    p[c] = std::exp(logits[c] - m);
    s += p[c];
  }
  for (double& v : p) v /= s;
  return ProbDist::unchecked(std::move(p));
}

// ---------------------------------------------------------------------------
// Features

double FeatureVector::weight(std::uint32_t index) const {
  const auto it = std::lower_bound(entries.begin(), entries.end(), index,
                                   [](const auto& e, std::uint32_t i) { return e.first < i; });
  return (it != entries.end() && it->first == index) ? it->second : 0.0;
}

double FeatureVector::dot(const FeatureVector& other) const {
  double s = 0.0;
  auto a = entries.begin();
  auto b = other.entries.begin();
  while (a != entries.end() && b != other.entries.end()) {
    if (a->first < b->first) ++a;
    else if (b->first < a->first) ++b;
    else s += (a++)->second * (b++)->second;
  }
  return s;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch >= 0x80) {
      current.push_back(static_cast<char>(ch < 0x80 ? std::tolower(ch) : ch));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

FeatureVector featurize(std::string_view text, std::uint32_t dim) {
  const auto tokens = tokenize(text);
  std::vector<std::uint32_t> indices;
  indices.reserve(tokens.size() * 2);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    indices.push_back(static_cast<std::uint32_t>(fnv1a64("u:" + tokens[i]) % dim));
    if (i + 1 < tokens.size()) {
      indices.push_back(
          static_cast<std::uint32_t>(fnv1a64("b:" + tokens[i] + " " + tokens[i + 1]) % dim));
    }
  }
  std::sort(indices.begin(), indices.end());
  FeatureVector fv;
  for (std::uint32_t idx : indices) {
    if (!fv.entries.empty() && fv.entries.back().first == idx) fv.entries.back().second += 1.0;
    else fv.entries.emplace_back(idx, 1.0);
  }
  return fv;
}

// ---------------------------------------------------------------------------
// Model

ClassifierModel::ClassifierModel(std::size_t num_classes, std::uint32_t dim, Hyperparams hyperparams)
    : num_classes_(num_classes),
      dim_(dim),
      hyperparams_(hyperparams),
      weights_(static_cast<std::size_t>(dim) * num_classes, 0.0),
      bias_(num_classes, 0.0) {
  if (num_classes < 2) throw InvalidArgument("a classifier needs at least two classes");
  if (dim == 0) throw InvalidArgument("feature dimension must be positive");
}

std::vector<double> ClassifierModel::logits(const FeatureVector& x) const {
  std::vector<double> z(bias_);
  for (const auto& [f, v] : x.entries) {
    const double* row = &weights_[static_cast<std::size_t>(f) * num_classes_];
    for (std::size_t c = 0; c < num_classes_; ++c) z[c] += row[c] * v;
  }
  return z;
}

ProbDist ClassifierModel::predict_dist(const FeatureVector& x) const { return softmax(logits(x)); }

json ClassifierModel::to_json() const {
  json rows = json::array();
  for (std::size_t f = 0; f < dim_; ++f) {
    const double* row = &weights_[f * num_classes_];
    if (std::all_of(row, row + num_classes_, [](double w) { return w == 0.0; })) continue;
    json r = json::array({f});
    for (std::size_t c = 0; c < num_classes_; ++c) r.push_back(row[c]);
    rows.push_back(std::move(r));
  }
  return json{
      {"format", kModelFormat},
      {"format_version", kModelFormatVersion},
      {"hash_version", kHashVersion},
      {"num_classes", num_classes_},
      {"dim", dim_},
      {"hyperparams",
       {{"learning_rate", hyperparams_.learning_rate},
        {"max_epochs", hyperparams_.max_epochs},
        {"l2", hyperparams_.l2},
        {"seed", hyperparams_.seed},
        {"inner_patience", hyperparams_.inner_patience}}},
      {"bias", bias_},
      {"weights", std::move(rows)},
  };
}

ClassifierModel ClassifierModel::from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw InvalidArgument("not a baseline model artifact");
    }
    if (j.at("format_version").get<int>() != kModelFormatVersion) {
      throw InvalidArgument("unsupported model format version");
    }
    if (j.at("hash_version").get<int>() != kHashVersion) {
      throw InvalidArgument("model was built with feature hash version " +
                            std::to_string(j.at("hash_version").get<int>()) + ", this build uses " +
                            std::to_string(kHashVersion));
    }
    const auto& h = j.at("hyperparams");
    Hyperparams hp;
    hp.learning_rate = h.at("learning_rate").get<double>();
    hp.max_epochs = h.at("max_epochs").get<std::size_t>();
    hp.l2 = h.at("l2").get<double>();
    hp.seed = h.at("seed").get<std::uint64_t>();
    hp.inner_patience = h.at("inner_patience").get<std::size_t>();
    ClassifierModel m(j.at("num_classes").get<std::size_t>(), j.at("dim").get<std::uint32_t>(), hp);
    m.bias_ = j.at("bias").get<std::vector<double>>();
    if (m.bias_.size() != m.num_classes_) throw InvalidArgument("bias has wrong length");
    for (const auto& r : j.at("weights")) {
      const auto f = r.at(0).get<std::size_t>();
      if (f >= m.dim_ || r.size() != m.num_classes_ + 1) throw InvalidArgument("bad weight row");
      for (std::size_t c = 0; c < m.num_classes_; ++c) {
        m.weights_[f * m.num_classes_ + c] = r.at(c + 1).get<double>();
      }
    }
    const auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(m.bias_.begin(), m.bias_.end(), finite) ||
        !std::all_of(m.weights_.begin(), m.weights_.end(), finite)) {
      throw InvalidArgument("model parameters must be finite");
    }
    return m;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed model artifact: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Losses

double example_loss(const ClassifierModel& model, const TrainExample& example) {
  const auto z = model.logits(example.features);
  const double lse = log_sum_exp(z);
  if (const auto* label = std::get_if<ClassIndex>(&example.target.value)) {
    return lse - z[*label];
  }
  const auto& q = std::get<ProbDist>(example.target.value);
  double kl = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    if (q[c] > 0.0) kl += q[c] * (std::log(q[c]) - (z[c] - lse));
  }
  return kl;
}

double objective(const ClassifierModel& model, std::span<const TrainExample> examples, double l2) {
  double reg = 0.0;
  for (double w : model.weights()) reg += w * w;
  return mean_loss(model, examples) + 0.5 * l2 * reg;
}

ModelGradient objective_gradient(const ClassifierModel& model,
                                 std::span<const TrainExample> examples, double l2) {
  const std::size_t num_classes = model.num_classes();
  ModelGradient g;
  g.weights.assign(model.weights().size(), 0.0);
  g.bias.assign(num_classes, 0.0);
  const double inv_n = 1.0 / static_cast<double>(examples.size());
  std::vector<double> r;
  for (const auto& ex : examples) {
    logit_residual(model.predict_dist(ex.features), ex.target, r);
    for (const auto& [f, v] : ex.features.entries) {
      double* row = &g.weights[static_cast<std::size_t>(f) * num_classes];
      for (std::size_t c = 0; c < num_classes; ++c) row[c] += inv_n * r[c] * v;
    }
    for (std::size_t c = 0; c < num_classes; ++c) g.bias[c] += inv_n * r[c];
  }
  for (std::size_t i = 0; i < g.weights.size(); ++i) g.weights[i] += l2 * model.weights()[i];
  return g;
}

// ---------------------------------------------------------------------------
// Training

ClassifierModel train(std::span<const TrainExample> examples, std::size_t num_classes,
                      std::uint32_t dim, const Hyperparams& hp,
                      std::span<const TrainExample> validation, TrainLog* log) {
  if (examples.empty()) throw TrainingError("cannot train on an empty example list");
  if (!(hp.learning_rate > 0.0) || !(hp.l2 >= 0.0) || hp.max_epochs == 0) {
    throw TrainingError("invalid hyperparameters");
  }
  for (const auto& ex : examples) check_example(ex, num_classes, dim);
  for (const auto& ex : validation) check_example(ex, num_classes, dim);

  ClassifierModel model(num_classes, dim, hp);
  auto& weights = model.weights();
  auto& bias = model.bias();

  // Only rows hit by a training feature can become non-zero.
  std::vector<std::uint32_t> touched;
  for (const auto& ex : examples) {
    for (const auto& e : ex.features.entries) touched.push_back(e.first);
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());

  // L2 decay is applied lazily: effective weights = scale * stored weights.
  double scale = 1.0;
  const auto materialize = [&] {
    if (scale == 1.0) return;
    for (std::uint32_t f : touched) {
      double* row = &weights[static_cast<std::size_t>(f) * num_classes];
      for (std::size_t c = 0; c < num_classes; ++c) row[c] *= scale;
    }
    scale = 1.0;
  };

  const bool early_stopping = !validation.empty() && hp.inner_patience > 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<double> best_rows;
  std::vector<double> best_bias;

  TrainLog local_log;
  TrainLog& out_log = log ? *log : local_log;
  out_log = TrainLog{};

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(hp.seed);
  std::vector<double> z(num_classes), r;

  for (std::size_t epoch = 1; epoch <= hp.max_epochs; ++epoch) {
    const double lr = hp.learning_rate / std::sqrt(static_cast<double>(epoch));
    const double decay = 1.0 - lr * hp.l2;
    rng.shuffle(order);
    for (std::size_t i : order) {
      const auto& ex = examples[i];
      for (std::size_t c = 0; c < num_classes; ++c) z[c] = bias[c];
      for (const auto& [f, v] : ex.features.entries) {
        const double* row = &weights[static_cast<std::size_t>(f) * num_classes];
        for (std::size_t c = 0; c < num_classes; ++c) z[c] += scale * row[c] * v;
      }
      logit_residual(softmax(z), ex.target, r);
      scale *= decay;
      const double step = lr / scale;
      for (const auto& [f, v] : ex.features.entries) {
        double* row = &weights[static_cast<std::size_t>(f) * num_classes];
        for (std::size_t c = 0; c < num_classes; ++c) row[c] -= step * r[c] * v;
      }
      for (std::size_t c = 0; c < num_classes; ++c) bias[c] -= lr * r[c];
    }
    materialize();

    double reg = 0.0;
    for (std::uint32_t f : touched) {
      const double* row = &weights[static_cast<std::size_t>(f) * num_classes];
      for (std::size_t c = 0; c < num_classes; ++c) reg += row[c] * row[c];
    }
    const double train_obj = mean_loss(model, examples) + 0.5 * hp.l2 * reg;
    if (!std::isfinite(train_obj)) {
      throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch));
    }
    out_log.epoch_loss.push_back(train_obj);

    if (early_stopping) {
      const double val = mean_loss(model, validation);
      if (!std::isfinite(val)) {
        throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
      }
      out_log.validation_loss.push_back(val);
      if (val < best_val) {
        best_val = val;
        since_best = 0;
        out_log.best_epoch = epoch;
        best_rows.clear();
        for (std::uint32_t f : touched) {
          const double* row = &weights[static_cast<std::size_t>(f) * num_classes];
          best_rows.insert(best_rows.end(), row, row + num_classes);
        }
        best_bias = bias;
      } else if (++since_best >= hp.inner_patience) {
        break;
      }
    } else {
      out_log.best_epoch = epoch;
    }
  }

  if (early_stopping && !best_bias.empty()) {
    for (std::size_t k = 0; k < touched.size(); ++k) {
      double* row = &weights[static_cast<std::size_t>(touched[k]) * num_classes];
      std::copy_n(&best_rows[k * num_classes], num_classes, row);
    }
    bias = best_bias;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Baseline backend

namespace {

unsigned dim_bits_of(std::uint32_t dim) {
  if (!std::has_single_bit(dim)) throw InvalidArgument("baseline dimension must be a power of two");
  return static_cast<unsigned>(std::countr_zero(dim));
}

std::vector<TrainExample> to_examples(std::span<const TrainRecord> records, std::uint32_t dim) {
  std::vector<TrainExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(TrainExample{featurize(r.text, dim), r.target});
  return out;
}

}  // namespace

BaselineClassifier::BaselineClassifier(BaselineConfig config) : config_(config) {
  if (config_.num_classes < 2) throw InvalidArgument("a classifier needs at least two classes");
  if (config_.dim_bits == 0 || config_.dim_bits > 26) throw InvalidArgument("dim_bits must lie in [1, 26]");
}

BaselineClassifier::BaselineClassifier(ClassifierModel model)
    : config_{model.num_classes(), dim_bits_of(model.dim()), model.hyperparams()},
      model_(std::move(model)) {}

void BaselineClassifier::fit(std::span<const TrainRecord> train_records,
                             std::span<const TrainRecord> validation) {
  const auto examples = to_examples(train_records, config_.dim());
  const auto val = to_examples(validation, config_.dim());
  model_ = train(examples, config_.num_classes, config_.dim(), config_.hyperparams, val, &log_);
}

const ClassifierModel& BaselineClassifier::model() const {
  if (!model_) throw TrainingError("classifier has not been trained");
  return *model_;
}

ProbDist BaselineClassifier::predict_dist(std::string_view text) const {
  return model().predict_dist(featurize(text, config_.dim()));
}

std::string BaselineClassifier::serialize() const { return model().to_json().dump() + "\n"; }

void BaselineClassifier::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model '" + path.string() + "'");
  out << serialize();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

BaselineClassifier BaselineClassifier::deserialize(std::string_view bytes) {
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("model artifact is not valid JSON: ") + e.what());
  }
  return BaselineClassifier(ClassifierModel::from_json(j));
}

BaselineClassifier BaselineClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

ClassifierFactory baseline_factory(BaselineConfig config) {
  return [config] { return std::make_unique<BaselineClassifier>(config); };
}

}  // namespace selftrain
