// Copyright 2026 The FadeKit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/* C interface to FadeKit. Every function that can fail returns an
 * fk_status; on failure fk_last_error() describes the problem for the
 * calling thread until its next failing call. Handles are opaque and owned
 * by the caller, who releases them with the matching *_free function.
 *
 * Images cross the boundary as contiguous (C,H,W) arrays of doubles in
 * [0,1], row-major. */

#ifndef FADEKIT_FADEKIT_H_
#define FADEKIT_FADEKIT_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FK_API __declspec(dllexport)
#else
#define FK_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fk_status {
  FK_OK = 0,
  FK_ERR_INVALID_ARGUMENT = 1,
  FK_ERR_SHAPE_MISMATCH = 2,
  FK_ERR_IO = 3,
  FK_ERR_NUMERIC = 4,
  FK_ERR_FAILED_PRECONDITION = 5,
  FK_ERR_INTERNAL = 6
} fk_status;

typedef struct fk_plan fk_plan;
typedef struct fk_extractor fk_extractor;

FK_API const char* fk_version(void);
/* Message of the calling thread's most recent failure, or "". */
FK_API const char* fk_last_error(void);
FK_API const char* fk_status_name(fk_status status);

/* Progress messages go to standard error; 0 is silent. */
FK_API void fk_set_verbosity(int level);

/* ---- plans ---------------------------------------------------------- */

FK_API fk_status fk_plan_new(fk_plan** out);
FK_API fk_status fk_plan_load(const char* path, fk_plan** out);
FK_API fk_status fk_plan_parse(const char* text, fk_plan** out);
FK_API void fk_plan_free(fk_plan* plan);

FK_API fk_status fk_plan_set(fk_plan* plan, const char* key, const char* value);
/* Copies the canonical value, NUL-terminated, into buf when it fits.
 * *needed (optional) receives the size including the terminator; a short
 * buffer yields FK_ERR_INVALID_ARGUMENT with *needed set. */
FK_API fk_status fk_plan_get(const fk_plan* plan, const char* key, char* buf, size_t buf_len,
                             size_t* needed);
FK_API fk_status fk_plan_serialize(const fk_plan* plan, char* buf, size_t buf_len,
                                   size_t* needed);
FK_API fk_status fk_plan_hash(const fk_plan* plan, uint64_t* out);

/* Static description of every plan key; strings live for the process. */
FK_API size_t fk_plan_field_count(void);
FK_API fk_status fk_plan_field(size_t index, const char** key, const char** default_value,
                               const char** help);

FK_API fk_status fk_check_protector(const char* name);
FK_API fk_status fk_check_setting(const char* name);

/* ---- pipeline stages ------------------------------------------------ */
/* Each reads and writes only below the plan's run.out directory. A NULL
 * protector or setting means every one listed in the plan. */

FK_API fk_status fk_gen_data(const fk_plan* plan);
FK_API fk_status fk_train_extractor(const fk_plan* plan);
FK_API fk_status fk_protect(const fk_plan* plan, const char* protector);
FK_API fk_status fk_attack(const fk_plan* plan, const char* protector);
FK_API fk_status fk_eval(const fk_plan* plan, const char* setting);
FK_API fk_status fk_report(const fk_plan* plan);
FK_API fk_status fk_run_all(const fk_plan* plan);

/* ---- metrics -------------------------------------------------------- */

FK_API fk_status fk_psnr(const double* reference, const double* candidate, size_t channels,
                         size_t height, size_t width, double* out);
FK_API fk_status fk_ssim(const double* reference, const double* candidate, size_t channels,
                         size_t height, size_t width, double* out);
FK_API fk_status fk_ad_statistic(const double* samples, size_t n, double* out);

/* ---- single-image protection ---------------------------------------- */

FK_API fk_status fk_extractor_load(const char* path, fk_extractor** out);
FK_API void fk_extractor_free(fk_extractor* extractor);
/* Embedding size D of the model. */
FK_API fk_status fk_extractor_dim(const fk_extractor* extractor, size_t* out);
/* Writes the unit-norm embedding of one image into out[0..D). */
FK_API fk_status fk_embed(const fk_extractor* extractor, const double* image, size_t channels,
                          size_t height, size_t width, double* out);

/* Protects one image with a registered protector. Algorithm settings come
 * from `plan` (defaults when NULL); the seeds are given explicitly. The
 * result has the input's shape. out_final_loss and out_constraint_met are
 * optional. */
FK_API fk_status fk_protect_image(const fk_extractor* extractor, const fk_plan* plan,
                                  const char* protector, const double* image, size_t channels,
                                  size_t height, size_t width, uint64_t noise_seed,
                                  uint64_t mask_seed, double* out_image, double* out_final_loss,
                                  int* out_constraint_met);

#ifdef __cplusplus
}  /* extern "C" */
#endif

#endif  /* FADEKIT_FADEKIT_H_ */
