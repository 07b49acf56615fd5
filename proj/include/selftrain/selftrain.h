#ifndef SELFTRAIN_SELFTRAIN_H
#define SELFTRAIN_SELFTRAIN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ST_API __declspec(dllexport)
#elif defined(__GNUC__)
#define ST_API __attribute__((visibility("default")))
#else
#define ST_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum st_status {
  ST_OK = 0,
  ST_ERR_INVALID_ARGUMENT = 1,
  ST_ERR_CONFIG = 2,
  ST_ERR_DATA = 3,
  ST_ERR_TRAINING = 4,
  ST_ERR_LLM = 5,
  ST_ERR_IO = 6,
  ST_ERR_INTERNAL = 7
} st_status;

ST_API const char* st_version(void);
ST_API const char* st_status_name(st_status status);

/* Message of the last failed call on this thread; "" when none. */
ST_API const char* st_last_error(void);

/* Frees strings returned through char** out-parameters. */
ST_API void st_string_free(char* s);

typedef void (*st_log_fn)(const char* message, void* user);

/* ------------------------------------------------------------------ */
/* Datasets */

typedef struct st_dataset st_dataset;

/* format: "jsonl" or "csv". class_names may be NULL for the default
   positive/negative/neutral. */
ST_API st_status st_dataset_load(const char* path, const char* format, const char* const* class_names,
                                 size_t num_classes, st_dataset** out);
ST_API void st_dataset_free(st_dataset* dataset);
ST_API size_t st_dataset_size(const st_dataset* dataset);
ST_API size_t st_dataset_num_classes(const st_dataset* dataset);

/* ------------------------------------------------------------------ */
/* Models */

typedef struct st_model st_model;

typedef struct st_train_params {
  double learning_rate;
  size_t max_epochs;
  double l2;
  size_t inner_patience;
  unsigned dim_bits;
  uint64_t seed;
} st_train_params;

ST_API void st_train_params_default(st_train_params* params);

/* Supervised fit on every gold-labeled instance of the dataset. */
ST_API st_status st_model_train(const st_dataset* labeled, const st_train_params* params, st_model** out);
ST_API st_status st_model_load(const char* path, st_model** out);
ST_API st_status st_model_save(const st_model* model, const char* path);
ST_API void st_model_free(st_model* model);
ST_API size_t st_model_num_classes(const st_model* model);
/* Writes num_classes probabilities into probs. */
ST_API st_status st_model_predict(const st_model* model, const char* text, double* probs, size_t num_classes);

/* ------------------------------------------------------------------ */
/* Instance selection */

/* strategy_json: {"name": "conf_threshold"|"ent_threshold"|"max_conf"|"min_ent"
   |"soft_label"|"random", "t"|"k"|"b": ..., "batch_cap": ...}.
   probs is row-major n x num_classes. selected receives indices into the
   input (capacity n) ordered by id; *num_selected its length. */
ST_API st_status st_select(const char* strategy_json, const char* const* ids, const double* probs, size_t n,
                           size_t num_classes, uint64_t seed, size_t* selected, size_t* num_selected);

/* ------------------------------------------------------------------ */
/* Commands. Each writes artifacts under the output directory and returns a
   JSON summary through summary_json (may be NULL). */

typedef struct st_run_options {
  const char* config_path;
  int has_seed;
  uint64_t seed;
  const char* out_dir; /* NULL: config output_dir */
  st_log_fn log;       /* NULL: silent */
  void* log_user;
} st_run_options;

typedef struct st_llm_options {
  const char* mode; /* NULL: config value */
  int has_threshold;
  double threshold;
  int has_n_shot;
  size_t n_shot;
  const char* fixtures;
  const char* endpoint;
} st_llm_options;

typedef struct st_sweep_options {
  const char* axis; /* conf_threshold | ent_threshold | score_threshold | n_shot */
  const double* grid; /* NULL: default grid for the axis */
  size_t grid_size;
  const uint64_t* seeds; /* NULL: config seeds */
  size_t num_seeds;
  size_t parallel;
} st_sweep_options;

typedef struct st_synth_options {
  size_t n_per_class;
  size_t test_per_class;
  size_t words_per_class;
  double noise;
  uint64_t seed;
  const double* priors; /* NULL: generator default */
  size_t num_priors;
  const char* const* class_names; /* NULL: default classes */
  size_t num_classes;
} st_synth_options;

ST_API void st_synth_options_default(st_synth_options* options);

ST_API st_status st_cmd_train(const st_run_options* options, char** summary_json);
ST_API st_status st_cmd_selftrain(const st_run_options* options, char** summary_json);
ST_API st_status st_cmd_llm_label(const st_run_options* options, const st_llm_options* llm, char** summary_json);
ST_API st_status st_cmd_sweep(const st_run_options* options, const st_sweep_options* sweep, char** summary_json);
ST_API st_status st_cmd_evaluate(const char* model_path, const char* data_path, const char* format,
                                 const char* const* class_names, size_t num_classes, const char* out_dir,
                                 char** summary_json);
ST_API st_status st_cmd_report(const char* sweep_json, const char* out_dir, char** summary_json);
ST_API st_status st_cmd_synth(const st_synth_options* options, const char* out_dir, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
