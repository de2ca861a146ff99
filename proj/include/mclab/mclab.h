/* Copyright 2026 The mclab Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to mclab. Every fallible call returns an mclab_status; on a
 * non-zero status mclab_last_error() describes the failure. Strings returned
 * through char** outputs are owned by the caller and released with
 * mclab_string_free().
 */

#ifndef MCLAB_MCLAB_H_
#define MCLAB_MCLAB_H_

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mclab_status {
  MCLAB_OK = 0,
  MCLAB_E_USAGE = 2,      /* bad argument to the API itself */
  MCLAB_E_VALIDATION = 3, /* config, parse, integrity, validation or data errors */
  MCLAB_E_RUNTIME = 4     /* dimension, numeric, degenerate batch, metric or I/O errors */
} mclab_status;

typedef enum mclab_side { MCLAB_SIDE_IMAGE = 0, MCLAB_SIDE_TEXT = 1 } mclab_side;

typedef struct mclab_corpus mclab_corpus;
typedef struct mclab_model mclab_model;

/* Receives one JSON object per call (step records, warnings). */
typedef void (*mclab_log_fn)(const char* json_line, void* user);

const char* mclab_version(void);
/* Message of the last failure on this thread, or "" after a success. */
const char* mclab_last_error(void);
void mclab_string_free(char* s);

/* Keeps large numeric buffers mapped between steps. Call once at start-up. */
void mclab_tune_allocator(void);

/* Applies `overrides_json` (JSON merge patch, may be NULL) over `config_json`
 * (may be NULL for defaults), validates, and returns the resolved config. */
mclab_status mclab_config_resolve(const char* config_json, const char* overrides_json, char** out_resolved);

/* Corpus */
mclab_status mclab_corpus_generate(const char* config_json, mclab_corpus** out);
mclab_status mclab_corpus_load(const char* path, mclab_corpus** out);
mclab_status mclab_corpus_save(const mclab_corpus* corpus, const char* dir);
size_t mclab_corpus_patient_count(const mclab_corpus* corpus);
size_t mclab_corpus_image_count(const mclab_corpus* corpus);
void mclab_corpus_free(mclab_corpus* corpus);

/* Pretrains on the corpus into `out_dir` and returns the best checkpoint path. */
mclab_status mclab_pretrain(const mclab_corpus* corpus, const char* config_json, const char* out_dir,
                            mclab_log_fn on_step, void* user, char** out_checkpoint);

/* Model */
mclab_status mclab_model_load(const char* checkpoint_path, mclab_model** out);
void mclab_model_free(mclab_model* model);
int mclab_model_dim(const mclab_model* model);
/* Pixels are HxWxC floats in [0,1] matching the model image size. */
mclab_status mclab_model_embed_image(const mclab_model* model, const float* pixels, size_t n_pixels, float* out,
                                     size_t out_len);
mclab_status mclab_model_embed_text(const mclab_model* model, const char* text, float* out, size_t out_len);

/* Writes an embedding store for the images of one split ("train", "val",
 * "test" or "all") or for the class prompts. */
mclab_status mclab_embed_store(const mclab_model* model, const mclab_corpus* corpus, const char* split,
                               mclab_side side, const char* out_path, size_t* out_rows);

/* Runs "zeroshot", "retrieval", "fewshot" or "finetune" and writes the
 * metric lines to `report_path`. */
mclab_status mclab_evaluate(const char* checkpoint_path, const mclab_corpus* corpus, const char* protocol,
                            const char* config_json, const char* report_path, mclab_log_fn on_warning, void* user,
                            size_t* out_metrics);

/* Table of every metric line under `in_dir` plus SVG plots beside `out_file`. */
mclab_status mclab_report(const char* in_dir, const char* out_file, size_t* out_metrics);

#ifdef __cplusplus
}
#endif

#endif /* MCLAB_MCLAB_H_ */
