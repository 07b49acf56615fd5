#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace selftrain {

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

std::string where(const std::string& provenance, std::size_t line) {
  return provenance + ":" + std::to_string(line);
}

ClassIndex label_index(const std::string& label, const std::vector<std::string>& class_names,
                       const std::string& location) {
  const auto it = std::find(class_names.begin(), class_names.end(), label);
  if (it == class_names.end()) {
    throw DataError(DataErrorCode::UnknownLabel, location + ": unknown label '" + label + "'");
  }
  return static_cast<ClassIndex>(it - class_names.begin());
}

void check_class_names(const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) {
    throw DataError(DataErrorCode::InvalidSpec, "at least two class names are required");
  }
  std::set<std::string> seen(class_names.begin(), class_names.end());
  if (seen.size() != class_names.size()) {
    throw DataError(DataErrorCode::InvalidSpec, "class names must be distinct");
  }
}

// Shared record builder for both formats.
class RecordSink {
 public:
  RecordSink(const std::vector<std::string>& class_names, std::string provenance)
      : class_names_(class_names), provenance_(std::move(provenance)) {
    check_class_names(class_names_);
    dataset_.class_names = class_names_;
    dataset_.provenance = provenance_;
  }

  void add(std::optional<std::string> id, const std::string& text,
           const std::optional<std::string>& label, std::size_t line) {
    const auto location = where(provenance_, line);
    if (trim(text).empty()) {
      throw DataError(DataErrorCode::Malformed, location + ": empty text");
    }
    Instance inst;
    inst.id = id ? *id : "row-" + std::to_string(dataset_.instances.size());
    if (inst.id.empty()) throw DataError(DataErrorCode::Malformed, location + ": empty id");
    if (!ids_.insert(inst.id).second) {
      throw DataError(DataErrorCode::DuplicateId, location + ": duplicate id '" + inst.id + "'");
    }
    inst.text = text;
    if (label) inst.gold_label = label_index(*label, class_names_, location);
    dataset_.instances.push_back(std::move(inst));
  }

  Dataset finish() && { return std::move(dataset_); }

 private:
  const std::vector<std::string>& class_names_;
  std::string provenance_;
  Dataset dataset_;
  std::set<std::string> ids_;
};

// RFC 4180 record reader. Returns false at end of input.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields, std::size_t& line,
                     const std::string& provenance) {
  fields.clear();
  int c = in.peek();
  if (c == std::char_traits<char>::eof()) return false;
  ++line;
  const std::size_t start_line = line;
  std::string field;
  bool quoted = false;
  bool field_started_quoted = false;
  while (true) {
    c = in.get();
    if (c == std::char_traits<char>::eof()) {
      if (quoted) {
        throw DataError(DataErrorCode::Malformed,
                        where(provenance, start_line) + ": unterminated quoted field");
      }
      fields.push_back(std::move(field));
      return true;
    }
    const char ch = static_cast<char>(c);
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get();
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"') {
      if (!field.empty() || field_started_quoted) {
        throw DataError(DataErrorCode::Malformed,
                        where(provenance, line) + ": stray quote inside unquoted field");
      }
      quoted = true;
      field_started_quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
      field_started_quoted = false;
    } else if (ch == '\r' && in.peek() == '\n') {
      // CRLF terminator; '\n' handled next.
    } else if (ch == '\n') {
      fields.push_back(std::move(field));
      return true;
    } else {
      if (field_started_quoted) {
        throw DataError(DataErrorCode::Malformed,
                        where(provenance, line) + ": text after closing quote");
      }
      field.push_back(ch);
    }
  }
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& inst : instances) {
    if (inst.gold_label) ++counts.at(*inst.gold_label);
  }
  return counts;
}

std::vector<ClassIndex> Dataset::gold_labels() const {
  std::vector<ClassIndex> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    if (!inst.gold_label) {
      throw DataError(DataErrorCode::MissingLabel, "instance '" + inst.id + "' has no gold label");
    }
    out.push_back(*inst.gold_label);
  }
  return out;
}

std::vector<std::string> default_class_names() { return {"positive", "negative", "neutral"}; }

DataFormat parse_format(std::string_view name) {
  if (name == "jsonl") return DataFormat::Jsonl;
  if (name == "csv") return DataFormat::Csv;
  throw DataError(DataErrorCode::InvalidSpec, "unknown data format '" + std::string(name) + "'");
}

void validate(const Dataset& dataset) {
  check_class_names(dataset.class_names);
  std::set<std::string> ids;
  for (const auto& inst : dataset.instances) {
    if (!ids.insert(inst.id).second) {
      throw DataError(DataErrorCode::DuplicateId, "duplicate id '" + inst.id + "'");
    }
    if (trim(inst.text).empty()) {
      throw DataError(DataErrorCode::Malformed, "instance '" + inst.id + "' has empty text");
    }
    if (inst.gold_label && *inst.gold_label >= dataset.num_classes()) {
      throw DataError(DataErrorCode::UnknownLabel, "instance '" + inst.id + "' label out of range");
    }
  }
}

Dataset read_jsonl(std::istream& in, const std::vector<std::string>& class_names,
                   const std::string& provenance) {
  RecordSink sink(class_names, provenance);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto location = where(provenance, line_no);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(DataErrorCode::Malformed, location + ": invalid JSON: " + e.what());
    }
    if (!record.is_object()) {
      throw DataError(DataErrorCode::Malformed, location + ": record is not an object");
    }
    const auto text = record.find("text");
    if (text == record.end() || !text->is_string()) {
      throw DataError(DataErrorCode::Malformed, location + ": missing string field 'text'");
    }
    std::optional<std::string> id;
    if (const auto it = record.find("id"); it != record.end() && !it->is_null()) {
      if (!it->is_string()) {
        throw DataError(DataErrorCode::Malformed, location + ": 'id' must be a string");
      }
      id = it->get<std::string>();
    }
    std::optional<std::string> label;
    if (const auto it = record.find("label"); it != record.end() && !it->is_null()) {
      if (!it->is_string()) {
        throw DataError(DataErrorCode::Malformed, location + ": 'label' must be a string");
      }
      label = it->get<std::string>();
    }
    sink.add(id, text->get<std::string>(), label, line_no);
  }
  return std::move(sink).finish();
}

Dataset read_csv(std::istream& in, const std::vector<std::string>& class_names,
                 const std::string& provenance) {
  RecordSink sink(class_names, provenance);
  std::vector<std::string> fields;
  std::size_t line = 0;
  if (!read_csv_record(in, fields, line, provenance)) {
    throw DataError(DataErrorCode::Malformed, provenance + ": missing CSV header");
  }
  if (!fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) fields[0].erase(0, 3);
  int id_col = -1, text_col = -1, label_col = -1;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto name = trim(fields[i]);
    if (name == "id") id_col = static_cast<int>(i);
    else if (name == "text") text_col = static_cast<int>(i);
    else if (name == "label") label_col = static_cast<int>(i);
    else {
      throw DataError(DataErrorCode::Malformed,
                      where(provenance, line) + ": unexpected CSV column '" + name + "'");
    }
  }
  if (text_col < 0) {
    throw DataError(DataErrorCode::Malformed, where(provenance, line) + ": CSV header lacks 'text'");
  }
  const std::size_t width = fields.size();
  while (true) {
    const std::size_t record_line = line + 1;
    if (!read_csv_record(in, fields, line, provenance)) break;
    if (fields.size() == 1 && trim(fields[0]).empty()) continue;
    if (fields.size() != width) {
      throw DataError(DataErrorCode::Malformed,
                      where(provenance, record_line) + ": expected " + std::to_string(width) +
                          " fields, got " + std::to_string(fields.size()));
    }
    std::optional<std::string> id;
    if (id_col >= 0 && !fields[id_col].empty()) id = fields[id_col];
    std::optional<std::string> label;
    if (label_col >= 0 && !fields[label_col].empty()) label = fields[label_col];
    sink.add(id, fields[text_col], label, record_line);
  }
  return std::move(sink).finish();
}

Dataset load_dataset(const std::filesystem::path& path, DataFormat format,
                     const std::vector<std::string>& class_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  return format == DataFormat::Jsonl ? read_jsonl(in, class_names, path.string())
                                     : read_csv(in, class_names, path.string());
}

void write_jsonl(std::ostream& out, const Dataset& dataset) {
  for (const auto& inst : dataset.instances) {
    json record = {{"id", inst.id}, {"text", inst.text}};
    if (inst.gold_label) record["label"] = dataset.class_names.at(*inst.gold_label);
    out << record.dump() << '\n';
  }
}

void write_csv(std::ostream& out, const Dataset& dataset) {
  out << "id,text,label\r\n";
  for (const auto& inst : dataset.instances) {
    out << csv_escape(inst.id) << ',' << csv_escape(inst.text) << ',';
    if (inst.gold_label) out << csv_escape(dataset.class_names.at(*inst.gold_label));
    out << "\r\n";
  }
}

void save_jsonl(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  write_jsonl(out, dataset);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TrainTestSplit split_train_test(const Dataset& dataset, const SplitSpec& spec) {
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw DataError(DataErrorCode::InvalidSpec, "test_fraction must lie in (0, 1)");
  }
  dataset.gold_labels();  // evaluation mode: every instance labeled
  const std::size_t n = dataset.size();
  const auto test_n = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(n) + 0.5));
  if (test_n == 0 || test_n >= n) {
    throw DataError(DataErrorCode::TooSmall, "dataset of " + std::to_string(n) +
                                                 " instances is too small for test_fraction " +
                                                 std::to_string(spec.test_fraction));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  std::vector<bool> in_test(n, false);
  for (std::size_t i = 0; i < test_n; ++i) in_test[order[i]] = true;

  TrainTestSplit out;
  out.train.class_names = out.test.class_names = dataset.class_names;
  out.train.provenance = dataset.provenance + "#train";
  out.test.provenance = dataset.provenance + "#test";
  for (std::size_t i = 0; i < n; ++i) {
    (in_test[i] ? out.test : out.train).instances.push_back(dataset.instances[i]);
  }
  return out;
}

std::optional<ClassIndex> ShadowGold::find(const std::string& id) const {
  const auto it = labels_.find(id);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

NShotSample sample_n_shot(const Dataset& train, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DataError(DataErrorCode::InvalidSpec, "n-shot must be positive");
  const std::size_t num_classes = train.num_classes();
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (const auto& label = train.instances[i].gold_label) by_class.at(*label).push_back(i);
  }
  std::vector<bool> chosen(train.size(), false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& members = by_class[c];
    if (members.size() < n) {
      throw DataError(DataErrorCode::InsufficientClassCount,
                      "class '" + train.class_names[c] + "' has " + std::to_string(members.size()) +
                          " labeled instances, " + std::to_string(n) + " needed");
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(members);
    for (std::size_t i = 0; i < n; ++i) chosen[members[i]] = true;
  }

  NShotSample out;
  out.labeled.class_names = out.pool.class_names = train.class_names;
  out.labeled.provenance = train.provenance + "#labeled";
  out.pool.provenance = train.provenance + "#pool";
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& inst = train.instances[i];
    if (chosen[i]) {
      out.labeled.instances.push_back(inst);
    } else {
      if (inst.gold_label) out.shadow_gold.set(inst.id, *inst.gold_label);
      out.pool.instances.push_back(Instance{inst.id, inst.text, std::nullopt});
    }
  }
  return out;
}

std::vector<double> ldc_priors() {
  const double total = 5658.0 + 2578.0 + 10106.0;
  return {5658.0 / total, 2578.0 / total, 10106.0 / total};
}

namespace {

std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& priors) {
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw DataError(DataErrorCode::InvalidSpec, "priors must be finite and non-negative");
    }
    sum += p;
  }
  if (sum <= 0.0) throw DataError(DataErrorCode::InvalidSpec, "priors sum to zero");
  std::vector<std::size_t> counts(priors.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < priors.size(); ++c) {
    const double exact = static_cast<double>(total) * priors[c] / sum;
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  // Largest remainder first, lower class index on ties.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[remainders[i].second];
  return counts;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  const std::size_t num_classes = spec.class_names.size();
  check_class_names(spec.class_names);
  if (spec.vocab_per_class.size() != num_classes) {
    throw DataError(DataErrorCode::InvalidSpec, "one vocabulary list per class is required");
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (spec.vocab_per_class[c].empty()) {
      throw DataError(DataErrorCode::EmptyVocabulary,
                      "empty vocabulary for class '" + spec.class_names[c] + "'");
    }
  }
  if (!(spec.noise >= 0.0 && spec.noise < 1.0)) {
    throw DataError(DataErrorCode::InvalidSpec, "noise must lie in [0, 1)");
  }
  if (spec.min_words == 0 || spec.min_words > spec.max_words) {
    throw DataError(DataErrorCode::InvalidSpec, "invalid word-count range");
  }
  std::vector<double> priors = spec.priors;
  if (priors.empty()) priors = num_classes == 3 ? ldc_priors() : std::vector<double>(num_classes, 1.0);
  if (priors.size() != num_classes) {
    throw DataError(DataErrorCode::InvalidSpec, "one prior per class is required");
  }
  const auto counts = apportion(spec.n_per_class * num_classes, priors);

  std::vector<ClassIndex> labels;
  for (std::size_t c = 0; c < num_classes; ++c) labels.insert(labels.end(), counts[c], c);
  Rng rng(spec.seed);
  rng.shuffle(labels);

  Dataset out;
  out.class_names = spec.class_names;
  std::ostringstream prov;
  prov << "synth(n_per_class=" << spec.n_per_class << ",noise=" << spec.noise
       << ",seed=" << spec.seed << ")";
  out.provenance = prov.str();
  out.instances.reserve(labels.size());
  const std::size_t span = spec.max_words - spec.min_words + 1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const ClassIndex label = labels[i];
    const std::size_t length = spec.min_words + rng.below(span);
    std::string text;
    for (std::size_t w = 0; w < length; ++w) {
      ClassIndex source = label;
      if (num_classes > 1 && rng.uniform() < spec.noise) {
        source = rng.below(num_classes - 1);
        if (source >= label) ++source;
      }
      const auto& vocab = spec.vocab_per_class[source];
      if (!text.empty()) text.push_back(' ');
      text += vocab[rng.below(vocab.size())];
    }
    std::ostringstream id;
    id << "synth-" << std::setw(6) << std::setfill('0') << i;
    out.instances.push_back(Instance{id.str(), std::move(text), label});
  }
  return out;
}

std::vector<std::vector<std::string>> make_vocabulary(std::size_t num_classes,
                                                      std::size_t words_per_class,
                                                      std::uint64_t seed) {
  static constexpr std::string_view onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p",
                                                "r", "s", "t", "v", "z", "br", "st", "tr", "pl"};
  static constexpr std::string_view vowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  Rng rng(seed);
  std::set<std::string> used;
  std::vector<std::vector<std::string>> vocab(num_classes);
  for (auto& words : vocab) {
    while (words.size() < words_per_class) {
      const std::size_t syllables = 2 + rng.below(3);
      std::string word;
      for (std::size_t s = 0; s < syllables; ++s) {
        word += onsets[rng.below(std::size(onsets))];
        word += vowels[rng.below(std::size(vowels))];
      }
      if (used.insert(word).second) words.push_back(std::move(word));
    }
  }
  return vocab;
}

}  // namespace selftrain
