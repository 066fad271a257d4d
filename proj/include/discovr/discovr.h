/* Copyright 2026 The DISCOVR Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the DISCOVR library: configuration, synthetic data,
 * pretraining, evaluation and a few numeric utilities.
 *
 * All functions return a discovr_status. On failure, discovr_last_error()
 * returns a message describing the most recent error on the calling thread.
 * Strings returned through char** out-parameters are owned by the caller and
 * must be released with discovr_free().
 */
#ifndef DISCOVR_DISCOVR_H_
#define DISCOVR_DISCOVR_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DISCOVR_API __declspec(dllexport)
#else
#define DISCOVR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum discovr_status {
  DISCOVR_OK = 0,
  DISCOVR_ERR_INVALID_ARGUMENT = 1,
  DISCOVR_ERR_CONFIG = 2,
  DISCOVR_ERR_DATA = 3,
  DISCOVR_ERR_IO = 4,
  DISCOVR_ERR_CORRUPT = 5,
  DISCOVR_ERR_VERSION = 6,
  DISCOVR_ERR_NUMERIC = 7,
  DISCOVR_ERR_GEOMETRY = 8,
  DISCOVR_ERR_SHAPE = 9,
  DISCOVR_ERR_INTERNAL = 10
} discovr_status;

typedef enum discovr_config_kind {
  DISCOVR_CONFIG_TRAIN = 0,
  DISCOVR_CONFIG_EVAL = 1,
  DISCOVR_CONFIG_SYNTH = 2
} discovr_config_kind;

typedef struct discovr_config discovr_config;
typedef struct discovr_trainer discovr_trainer;

/* Flags for discovr_pretrain. */
#define DISCOVR_PRETRAIN_FORCE 1u
#define DISCOVR_PRETRAIN_DRY_RUN 2u

/* Receives each training step as a JSON object. */
typedef void (*discovr_step_callback)(const char* step_json, void* user_data);

DISCOVR_API const char* discovr_version(void);
DISCOVR_API const char* discovr_status_string(discovr_status status);
DISCOVR_API const char* discovr_last_error(void);
DISCOVR_API void discovr_free(void* ptr);

/* Configuration objects hold defaults until keys are set. */
DISCOVR_API discovr_status discovr_config_create(discovr_config_kind kind, discovr_config** out);
DISCOVR_API void discovr_config_destroy(discovr_config* config);
DISCOVR_API discovr_status discovr_config_set(discovr_config* config, const char* key, const char* value);
DISCOVR_API discovr_status discovr_config_load_file(discovr_config* config, const char* path);
DISCOVR_API discovr_status discovr_config_load_json(discovr_config* config, const char* json);
DISCOVR_API discovr_status discovr_config_to_json(const discovr_config* config, char** out);
DISCOVR_API discovr_status discovr_config_validate(const discovr_config* config);

/* Schema introspection; key names are snake_case. */
DISCOVR_API size_t discovr_config_key_count(discovr_config_kind kind);
DISCOVR_API const char* discovr_config_key_name(discovr_config_kind kind, size_t index);
DISCOVR_API const char* discovr_config_key_type(discovr_config_kind kind, size_t index);
DISCOVR_API const char* discovr_config_key_help(discovr_config_kind kind, size_t index);

/* Writes a synthetic dataset; *manifest_out (optional) receives the path of
 * the all-splits manifest. */
DISCOVR_API discovr_status discovr_synth_generate(const discovr_config* synth, const char* out_dir, char** manifest_out);

/* Pretrains into out_dir. *result_out (optional) receives a JSON summary. */
DISCOVR_API discovr_status discovr_pretrain(const discovr_config* train, const char* manifest, const char* out_dir,
                                            unsigned flags, const char* resume_checkpoint,
                                            discovr_step_callback callback, void* user_data, char** result_out);

/* Runs an evaluation protocol; report_path may be NULL. */
DISCOVR_API discovr_status discovr_evaluate(const discovr_config* eval, const char* checkpoint, const char* manifest,
                                            const char* report_path, char** report_out);

/* Step-level training handle. */
DISCOVR_API discovr_status discovr_trainer_create(const discovr_config* train, discovr_trainer** out);
DISCOVR_API discovr_status discovr_trainer_load(const char* checkpoint, discovr_trainer** out);
DISCOVR_API void discovr_trainer_destroy(discovr_trainer* trainer);
DISCOVR_API discovr_status discovr_trainer_save(const discovr_trainer* trainer, const char* path);
DISCOVR_API discovr_status discovr_trainer_step_count(const discovr_trainer* trainer, int64_t* out);
/* One optimization step on `batch` clips stored contiguously as
 * (clip, t, y, x, c) floats in [0, 1]. */
DISCOVR_API discovr_status discovr_trainer_step(discovr_trainer* trainer, const float* clips, int batch, int frames,
                                                int height, int width, int channels, double* loss_out);
/* Class feature of one clip from the teacher video encoder; out holds
 * discovr_trainer_embedding_dim() doubles. */
DISCOVR_API discovr_status discovr_trainer_embed(const discovr_trainer* trainer, const float* clip, int frames,
                                                 int height, int width, int channels, double* out);
DISCOVR_API int discovr_trainer_embedding_dim(const discovr_trainer* trainer);

/* Balanced soft assignment of a rows x cols score matrix (row-major). */
DISCOVR_API discovr_status discovr_sinkhorn(const double* scores, int rows, int cols, double epsilon, int iterations,
                                            double* out);
/* *abnormal = 1 when ef < 45 or ef > 75. */
DISCOVR_API discovr_status discovr_label_from_ef(double ef, int* abnormal);

#ifdef __cplusplus
}
#endif

#endif /* DISCOVR_DISCOVR_H_ */
