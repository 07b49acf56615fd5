#include "selftrain/selftrain.h"

#include <cstdlib>
#include <cstring>
#include <map>
#include <new>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "experiment.hpp"
#include "sweep.hpp"

struct st_dataset {
  selftrain::Dataset data;
};

struct st_model {
  selftrain::BaselineClassifier classifier;
};

namespace {

using namespace selftrain;

thread_local std::string last_error;

st_status fail(st_status status, const std::string& message) {
  last_error = message;
  return status;
}

// Every entry point funnels exceptions through here; nothing escapes the C boundary.
template <class F>
st_status guard(F&& f) {
  try {
    last_error.clear();
    f();
    return ST_OK;
  } catch (const Error& e) {
    return fail(static_cast<st_status>(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(ST_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(ST_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(ST_ERR_INTERNAL, "unknown error");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const nlohmann::json& j) {
  if (out) *out = dup_string(j.dump(2));
}

std::vector<std::string> names_from(const char* const* class_names, std::size_t n) {
  if (!class_names) return default_class_names();
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) {
    require(class_names[i] != nullptr, "class name is NULL");
    names.emplace_back(class_names[i]);
  }
  return names;
}

RunOptions run_options(const st_run_options* o) {
  RunOptions r;
  if (o->has_seed) r.seed = o->seed;
  if (o->out_dir) r.out = o->out_dir;
  if (o->log) {
    const auto fn = o->log;
    void* user = o->log_user;
    r.log = [fn, user](const std::string& message) { fn(message.c_str(), user); };
  }
  return r;
}

LlmMode guarded_mode(const char* name) {
  try {
    return parse_mode(name);
  } catch (const LlmError& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig load_run_config(const st_run_options* o) {
  require(o != nullptr, "run options are NULL");
  require(o->config_path != nullptr, "config path is NULL");
  return load_config(o->config_path);
}

}  // namespace

extern "C" {

const char* st_version(void) { return SELFTRAIN_VERSION; }

const char* st_status_name(st_status status) {
  switch (status) {
    case ST_OK: return "ok";
    case ST_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case ST_ERR_CONFIG: return "config";
    case ST_ERR_DATA: return "data";
    case ST_ERR_TRAINING: return "training";
    case ST_ERR_LLM: return "llm";
    case ST_ERR_IO: return "io";
    case ST_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* st_last_error(void) { return last_error.c_str(); }

void st_string_free(char* s) { std::free(s); }

st_status st_dataset_load(const char* path, const char* format, const char* const* class_names, size_t num_classes,
                          st_dataset** out) {
  return guard([&] {
    require(path && format && out, "NULL argument");
    *out = nullptr;
    auto data = load_dataset(path, parse_format(format), names_from(class_names, num_classes));
    *out = new st_dataset{std::move(data)};
  });
}

void st_dataset_free(st_dataset* dataset) { delete dataset; }

size_t st_dataset_size(const st_dataset* dataset) { return dataset ? dataset->data.size() : 0; }

size_t st_dataset_num_classes(const st_dataset* dataset) { return dataset ? dataset->data.num_classes() : 0; }

void st_train_params_default(st_train_params* params) {
  if (!params) return;
  const Hyperparams h;
  const BaselineConfig b;
  params->learning_rate = h.learning_rate;
  params->max_epochs = h.max_epochs;
  params->l2 = h.l2;
  params->inner_patience = h.inner_patience;
  params->dim_bits = b.dim_bits;
  params->seed = h.seed;
}

st_status st_model_train(const st_dataset* labeled, const st_train_params* params, st_model** out) {
  return guard([&] {
    require(labeled && out, "NULL argument");
    *out = nullptr;
    st_train_params p;
    st_train_params_default(&p);
    if (params) p = *params;
    require(p.dim_bits >= 1 && p.dim_bits <= 24, "dim_bits must be in [1, 24]");
    BaselineConfig config;
    config.num_classes = labeled->data.num_classes();
    config.dim_bits = p.dim_bits;
    config.hyperparams = {p.learning_rate, p.max_epochs, p.l2, p.seed, p.inner_patience};
    std::vector<TrainRecord> records;
    for (const auto& inst : labeled->data.instances) {
      if (inst.gold_label) records.push_back({inst.id, inst.text, TrainTarget::hard(*inst.gold_label)});
    }
    BaselineClassifier classifier(config);
    classifier.fit(records, {});
    *out = new st_model{std::move(classifier)};
  });
}

st_status st_model_load(const char* path, st_model** out) {
  return guard([&] {
    require(path && out, "NULL argument");
    *out = nullptr;
    *out = new st_model{BaselineClassifier::load(path)};
  });
}

st_status st_model_save(const st_model* model, const char* path) {
  return guard([&] {
    require(model && path, "NULL argument");
    model->classifier.save(path);
  });
}

void st_model_free(st_model* model) { delete model; }

size_t st_model_num_classes(const st_model* model) { return model ? model->classifier.num_classes() : 0; }

st_status st_model_predict(const st_model* model, const char* text, double* probs, size_t num_classes) {
  return guard([&] {
    require(model && text && probs, "NULL argument");
    require(num_classes == model->classifier.num_classes(), "num_classes does not match the model");
    const auto dist = model->classifier.predict_dist(text);
    for (std::size_t c = 0; c < num_classes; ++c) probs[c] = dist[c];
  });
}

st_status st_select(const char* strategy_json, const char* const* ids, const double* probs, size_t n,
                    size_t num_classes, uint64_t seed, size_t* selected, size_t* num_selected) {
  return guard([&] {
    require(strategy_json && num_selected, "NULL argument");
    require(n == 0 || (ids && probs && selected), "NULL argument");
    require(num_classes >= 2, "num_classes must be >= 2");
    *num_selected = 0;
    SelectionStrategy strategy;
    try {
      strategy = strategy_from_json(nlohmann::json::parse(strategy_json));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(std::string("strategy: ") + e.what());
    }
    std::vector<Prediction> predictions;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) {
      require(ids[i] != nullptr, "instance id is NULL");
      std::vector<double> row(probs + i * num_classes, probs + (i + 1) * num_classes);
      predictions.push_back(Prediction::from(ids[i], ProbDist::checked(std::move(row))));
      require(index.emplace(ids[i], i).second, "duplicate instance id");
    }
    const auto result = select(strategy, predictions, seed);
    std::size_t k = 0;
    for (const auto& [id, _] : result.hard_selected) selected[k++] = index.at(id);
    for (const auto& [id, _] : result.soft_selected) selected[k++] = index.at(id);
    *num_selected = k;
  });
}

void st_synth_options_default(st_synth_options* options) {
  if (!options) return;
  const SynthCommand d;
  *options = st_synth_options{d.n_per_class, d.test_per_class, d.words_per_class, d.noise, d.seed,
                              nullptr,       0,                nullptr,           0};
}

st_status st_cmd_train(const st_run_options* options, char** summary_json) {
  return guard([&] {
    const auto config = load_run_config(options);
    emit(summary_json, cmd_train(config, run_options(options)));
  });
}

st_status st_cmd_selftrain(const st_run_options* options, char** summary_json) {
  return guard([&] {
    const auto config = load_run_config(options);
    emit(summary_json, cmd_selftrain(config, run_options(options)));
  });
}

st_status st_cmd_llm_label(const st_run_options* options, const st_llm_options* llm, char** summary_json) {
  return guard([&] {
    const auto config = load_run_config(options);
    LlmOverrides o;
    if (llm) {
      if (llm->mode) o.mode = guarded_mode(llm->mode);
      if (llm->has_threshold) o.threshold = llm->threshold;
      if (llm->has_n_shot) o.n_shot = llm->n_shot;
      if (llm->fixtures) o.fixtures = llm->fixtures;
      if (llm->endpoint) o.endpoint = llm->endpoint;
    }
    emit(summary_json, cmd_llm_label(config, o, run_options(options)));
  });
}

st_status st_cmd_sweep(const st_run_options* options, const st_sweep_options* sweep, char** summary_json) {
  return guard([&] {
    require(sweep && sweep->axis, "sweep options need an axis");
    const auto config = load_run_config(options);
    SweepSpec spec;
    spec.axis = parse_axis(sweep->axis);
    spec.grid = sweep->grid ? std::vector<double>(sweep->grid, sweep->grid + sweep->grid_size)
                            : default_grid(spec.axis);
    if (sweep->seeds) spec.seeds.assign(sweep->seeds, sweep->seeds + sweep->num_seeds);
    if (options->has_seed && !sweep->seeds) spec.seeds = {options->seed};
    spec.parallel = sweep->parallel == 0 ? 1 : sweep->parallel;
    emit(summary_json, cmd_sweep(config, spec, run_options(options)));
  });
}

st_status st_cmd_evaluate(const char* model_path, const char* data_path, const char* format,
                          const char* const* class_names, size_t num_classes, const char* out_dir,
                          char** summary_json) {
  return guard([&] {
    require(model_path && data_path, "model and data paths are required");
    std::optional<fs::path> out;
    if (out_dir) out = out_dir;
    DataFormat f = DataFormat::Jsonl;
    if (format) {
      try {
        f = parse_format(format);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
    emit(summary_json, cmd_evaluate(model_path, data_path, f, names_from(class_names, num_classes), out));
  });
}

st_status st_cmd_report(const char* sweep_json, const char* out_dir, char** summary_json) {
  return guard([&] {
    require(sweep_json && out_dir, "NULL argument");
    emit(summary_json, cmd_report(sweep_json, out_dir));
  });
}

st_status st_cmd_synth(const st_synth_options* options, const char* out_dir, char** summary_json) {
  return guard([&] {
    require(out_dir != nullptr, "output directory is required");
    st_synth_options o;
    st_synth_options_default(&o);
    if (options) o = *options;
    SynthCommand c;
    c.n_per_class = o.n_per_class;
    c.test_per_class = o.test_per_class;
    c.words_per_class = o.words_per_class;
    c.noise = o.noise;
    c.seed = o.seed;
    if (o.priors) c.priors.assign(o.priors, o.priors + o.num_priors);
    if (o.class_names) c.class_names = names_from(o.class_names, o.num_classes);
    try {
      emit(summary_json, cmd_synth(c, out_dir));
    } catch (const DataError& e) {
      throw ConfigError(std::string("synth: ") + e.what());
    }
  });
}

}  // extern "C"
