#ifndef FIRM_H
#define FIRM_H

/* C interface to the reflection-removal toolkit. Every call returns a
   firm_status; on failure firm_last_error() holds a message for the calling
   thread until that thread's next call. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(FIRM_BUILD)
#define FIRM_API __attribute__((visibility("default")))
#else
#define FIRM_API
#endif

typedef enum firm_status {
  FIRM_OK = 0,
  FIRM_ERR_ARGUMENT = 2,
  FIRM_ERR_DATA = 3,
  FIRM_ERR_UNSUPPORTED = 4,
  FIRM_ERR_INVARIANT = 5,
  FIRM_ERR_INTERNAL = 6
} firm_status;

typedef struct firm_config firm_config;
typedef struct firm_sarm firm_sarm;
typedef struct firm_removal firm_removal;

FIRM_API const char* firm_version(void);
FIRM_API const char* firm_last_error(void);
FIRM_API const char* firm_status_name(firm_status s);

/* ---- run configuration (INI) ---- */
FIRM_API firm_status firm_config_create(firm_config** out);
FIRM_API firm_status firm_config_load(const char* path, firm_config** out);
FIRM_API firm_status firm_config_set(firm_config* cfg, const char* key, const char* value);
/* Points *value at storage owned by cfg, valid until the next set or destroy. */
FIRM_API firm_status firm_config_get(const firm_config* cfg, const char* key, const char** value);
/* INI text of every key; owned by cfg with the same lifetime rule. */
FIRM_API firm_status firm_config_dump(const firm_config* cfg, const char** text);
FIRM_API void firm_config_destroy(firm_config* cfg);

/* ---- data ---- */
/* Writes a toy scene corpus (images + instance masks + index.jsonl) to out_dir. */
FIRM_API firm_status firm_make_corpus(const firm_config* cfg, const char* out_dir);
/* Synthesises synthesis.n triplets from the corpus at synthesis.source (or a
   fresh toy corpus when empty) into out_dir/manifest.jsonl. */
FIRM_API firm_status firm_synthesize(const firm_config* cfg, const char* out_dir);

/* ---- training ---- */
FIRM_API firm_status firm_train_sarm(const firm_config* cfg, const char* manifest, const char* out_dir);
FIRM_API firm_status firm_train_removal(const firm_config* cfg, const char* manifest, const char* out_dir);

/* ---- models ---- */
FIRM_API firm_status firm_sarm_load(const char* path, firm_sarm** out);
FIRM_API void firm_sarm_destroy(firm_sarm* m);
FIRM_API firm_status firm_removal_load(const char* path, firm_removal** out);
FIRM_API void firm_removal_destroy(firm_removal* m);

/* Planar RGB images are row-major interleaved doubles in [0,1] (h*w*3).
   guidance_json is a JSON array of guidance items. mask_out receives h*w
   values in {0, 0.5, 1}. */
FIRM_API firm_status firm_segment(const firm_sarm* sarm, const double* rgb, int height, int width,
                                  const char* guidance_json, double* mask_out);
FIRM_API firm_status firm_remove(const firm_removal* model, const double* rgb, int height, int width,
                                 const double* mask, double* t_out, double* r_out);

/* ---- file drivers ---- */
/* Segments and separates one PNG; writes T.png, R.png and mask.png to out_dir. */
FIRM_API firm_status firm_infer_image(const firm_sarm* sarm, const firm_removal* model, const char* image_png,
                                      const char* guidance_json, const char* out_dir);
FIRM_API firm_status firm_infer_manifest(const firm_config* cfg, const firm_sarm* sarm, const firm_removal* model,
                                         const char* manifest, const char* out_dir);
/* Writes report.json to out_dir and, when summary is non-null, copies its mean
   row as JSON into summary (truncated to summary_len). */
FIRM_API firm_status firm_evaluate(const char* predictions, const char* ground_truth, const char* out_dir,
                                   char* summary, size_t summary_len);
FIRM_API firm_status firm_ablate(const firm_config* cfg, const char* manifest, const char* out_dir);

/* Blocks serving HTTP until the process is interrupted. */
FIRM_API firm_status firm_serve(const firm_config* cfg, const firm_sarm* sarm, const firm_removal* model);

#ifdef __cplusplus
}
#endif

#endif
