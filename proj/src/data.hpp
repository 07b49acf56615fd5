#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"

namespace selftrain {

enum class DataErrorCode {
  Malformed,
  UnknownLabel,
  DuplicateId,
  MissingLabel,
  TooSmall,
  InsufficientClassCount,
  EmptyVocabulary,
  InvalidSpec,
};

class DataError : public Error {
 public:
  DataError(DataErrorCode code, const std::string& what) : Error(ErrorKind::Data, what), code_(code) {}
  DataErrorCode code() const noexcept { return code_; }

 private:
  DataErrorCode code_;
};

struct Instance {
  std::string id;
  std::string text;
  std::optional<ClassIndex> gold_label;

  bool operator==(const Instance&) const = default;
};

struct Dataset {
  std::vector<Instance> instances;
  std::vector<std::string> class_names;
  std::string provenance;

  std::size_t size() const noexcept { return instances.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  /// Per-class gold counts; unlabeled instances are not counted.
  std::vector<std::size_t> class_counts() const;
  /// Throws DataError if any instance lacks a gold label.
  std::vector<ClassIndex> gold_labels() const;
};

std::vector<std::string> default_class_names();

enum class DataFormat { Jsonl, Csv };

DataFormat parse_format(std::string_view name);

/// Checks the Dataset invariants (unique ids, non-empty text, labels < C,
/// distinct class names).
void validate(const Dataset& dataset);

Dataset load_dataset(const std::filesystem::path& path, DataFormat format,
                     const std::vector<std::string>& class_names);
Dataset read_jsonl(std::istream& in, const std::vector<std::string>& class_names,
                   const std::string& provenance = "<stream>");
Dataset read_csv(std::istream& in, const std::vector<std::string>& class_names,
                 const std::string& provenance = "<stream>");

void write_jsonl(std::ostream& out, const Dataset& dataset);
/// RFC 4180 with an id,text,label header.
void write_csv(std::ostream& out, const Dataset& dataset);
void save_jsonl(const std::filesystem::path& path, const Dataset& dataset);

struct SplitSpec {
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

/// Seeded random partition. |test| = round-half-up(test_fraction * N); both
/// sides keep the input order.
TrainTestSplit split_train_test(const Dataset& dataset, const SplitSpec& spec);

/// Gold labels of pool instances, visible to metrics only.
class ShadowGold {
 public:
  void set(const std::string& id, ClassIndex label) { labels_[id] = label; }
  std::optional<ClassIndex> find(const std::string& id) const;
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }

 private:
  std::map<std::string, ClassIndex> labels_;
};

struct NShotSample {
  Dataset labeled;
  Dataset pool;  // gold labels stripped
  ShadowGold shadow_gold;
};

/// Stratified uniform sampling without replacement: exactly n per class.
NShotSample sample_n_shot(const Dataset& train, std::size_t n, std::uint64_t seed);

/// Class priors of the LDC corpus (positive, negative, neutral).
std::vector<double> ldc_priors();

struct SynthSpec {
  std::size_t n_per_class = 100;
  std::vector<std::vector<std::string>> vocab_per_class;
  std::vector<std::string> class_names = default_class_names();
  double noise = 0.0;
  std::uint64_t seed = 0;
  // Empty: ldc_priors() for three classes, uniform otherwise.
  std::vector<double> priors;
  std::size_t min_words = 5;
  std::size_t max_words = 15;
};

/// Bag-of-words corpus: n_per_class * C instances apportioned by priors.
Dataset synth_generate(const SynthSpec& spec);

/// Disjoint pseudo-word vocabularies, one list per class.
std::vector<std::vector<std::string>> make_vocabulary(std::size_t num_classes,
                                                      std::size_t words_per_class,
                                                      std::uint64_t seed);

}  // namespace selftrain
