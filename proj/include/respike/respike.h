#ifndef RESPIKE_H
#define RESPIKE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(RESPIKE_BUILDING)
#define RSPK_API __attribute__((visibility("default")))
#else
#define RSPK_API
#endif

/* Every function returning int returns one of these. On failure the message
   is available from rspk_last_error() on the same thread. */
enum {
  RSPK_OK = 0,
  RSPK_E_INVALID = 1,  /* bad argument, config key or value */
  RSPK_E_IO = 2,       /* file or directory could not be read or written */
  RSPK_E_FORMAT = 3,   /* malformed RSPK file, manifest or checkpoint */
  RSPK_E_NUMERIC = 4,  /* non-finite loss or value */
  RSPK_E_SHAPE = 5,    /* tensor shapes do not fit together */
  RSPK_E_INTERNAL = 6
};

enum { RSPK_F32 = 0, RSPK_F64 = 1 };

typedef struct rspk_model rspk_model;

typedef struct {
  double flops;
  double syops;
  double energy_mj;
} rspk_energy;

typedef struct {
  double accuracy;
  double loss;
  size_t clips;
} rspk_eval;

typedef struct {
  size_t frames;
  size_t stride;
  size_t segments;
  size_t dropped_frames;
  double nonzero_fraction;
} rspk_sparsity;

typedef void (*rspk_log_fn)(const char* message, void* user);
typedef void (*rspk_epoch_fn)(size_t epoch, double loss, double train_acc, double val_acc,
                              void* user);

RSPK_API const char* rspk_version(void);
RSPK_API const char* rspk_last_error(void);
RSPK_API const char* rspk_status_name(int status);
/* Receives library warnings (e.g. frames dropped by decomposition). NULL restores stderr. */
RSPK_API void rspk_set_log_callback(rspk_log_fn fn, void* user);
/* Strings returned through char** out-parameters are owned by the caller. */
RSPK_API void rspk_string_free(char* s);

/* Configuration documents are JSON objects with optional sections "data",
   "model" and "train". Resolving fills every default and validates. A NULL
   or empty document means all defaults. */
RSPK_API int rspk_resolve_config(const char* json, char** resolved);

/* Writes manifest.json and clips/<split>_<index>.rspk for the "data" section
   under out_dir. */
RSPK_API int rspk_gen_data(const char* config_json, const char* out_dir, size_t* clips_written);

/* Splits one RSPK clip into out_dir/keys.rspk, out_dir/residuals.rspk and
   out_dir/sparsity.csv. */
RSPK_API int rspk_decompose(const char* clip_path, size_t stride, const char* out_dir,
                            rspk_sparsity* stats);

/* Builds a model from the "model" section. With data_dir set, the input size,
   frame count and class count are taken from that dataset's manifest. */
RSPK_API int rspk_model_create(const char* config_json, const char* data_dir, int precision,
                               rspk_model** out);
RSPK_API int rspk_model_load(const char* checkpoint_dir, rspk_model** out);
RSPK_API int rspk_model_save(const rspk_model* model, const char* checkpoint_dir);
RSPK_API void rspk_model_free(rspk_model* model);
RSPK_API int rspk_model_precision(const rspk_model* model, int* precision);
RSPK_API int rspk_model_config(const rspk_model* model, char** json);
RSPK_API int rspk_model_parameter_count(const rspk_model* model, size_t* count);

/* Trains on the "train" split with the "train" section, validating on "val"
   when present. metrics_csv may be NULL; on_epoch may be NULL. */
RSPK_API int rspk_train(rspk_model* model, const char* config_json, const char* data_dir,
                        const char* metrics_csv, rspk_epoch_fn on_epoch, void* user);
RSPK_API int rspk_evaluate(rspk_model* model, const char* data_dir, const char* split,
                           rspk_eval* out);

/* Measures FLOPs, SyOPs and energy per clip over up to max_clips clips of a
   split, drawn with `seed`. report_json may be NULL. */
RSPK_API int rspk_profile(rspk_model* model, const char* data_dir, const char* split,
                          size_t max_clips, uint64_t seed, const char* report_json,
                          rspk_energy* out);
/* Published FLOPs/SyOPs fixtures. rows receives a JSON array of rows. */
RSPK_API int rspk_table4_rows(char** rows);
RSPK_API int rspk_table4(const char* row, const char* report_json, rspk_energy* out,
                         double* published_mj);
/* "FLOPs=...G SyOPs=...G E=...mJ" */
RSPK_API int rspk_energy_summary(const rspk_energy* energy, char** out);

/* For clip `clip_index` of `split`, writes out_dir/attn_q<query>.ppm (the
   key frame with the head-averaged cross-attention weights of fusion stage
   `stage` (0-based) as a heat overlay, the top_k tokens outlined) per query, plus
   out_dir/attention.csv. */
RSPK_API int rspk_attn_dump(rspk_model* model, const char* data_dir, const char* split,
                            size_t clip_index, size_t stage, const size_t* queries,
                            size_t n_queries, size_t top_k, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
