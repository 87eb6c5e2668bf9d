#ifndef PPST_H
#define PPST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PpstStatus {
  PPST_STATUS_OK = 0,
  PPST_STATUS_NULL_POINTER = 1,
  PPST_STATUS_INVALID_UTF8 = 2,
  PPST_STATUS_CONFIG = 3,
  PPST_STATUS_INPUT = 4,
  PPST_STATUS_COMPATIBILITY = 5,
  PPST_STATUS_NUMERIC = 6,
  PPST_STATUS_PROTOCOL = 7,
  PPST_STATUS_UNAVAILABLE = 8,
  PPST_STATUS_IO = 9,
  PPST_STATUS_PANIC = 10,
} PpstStatus;

/**
 * Opaque generation pipeline: encoder, prefix mapper and a styled LM loaded from a run.
 */
typedef struct PpstPipeline PpstPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *ppst_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next failing
 * call on the same thread.
 */
const char *ppst_last_error(void);

/**
 * ROUGE-L F-score of `candidate` against the best of `n_references` references.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings; `references` must hold
 * `n_references` of them.
 */
enum PpstStatus ppst_rouge_l(const char *candidate,
                             const char *const *references,
                             size_t n_references,
                             double *out_f);

/**
 * ChrF++ of `candidate` against the best of `n_references` references, in [0, 1].
 *
 * # Safety
 * As for [`ppst_rouge_l`].
 */
enum PpstStatus ppst_chrf_pp(const char *candidate,
                             const char *const *references,
                             size_t n_references,
                             double *out_score);

/**
 * Opens the run described by the TOML file at `config_path` and loads the model for
 * `style` (a trained style, `non-styled` or `plain`).
 *
 * # Safety
 * `config_path` and `style` must be valid strings; `out` must be writable.
 */
enum PpstStatus ppst_pipeline_open(const char *config_path,
                                   const char *style,
                                   struct PpstPipeline **out);

/**
 * Generates a story for one image and returns the record as JSON in `out_json`.
 * An undecodable image still succeeds, with the record's `error` field set.
 *
 * # Safety
 * `pipeline` must come from [`ppst_pipeline_open`]; `out_json` must be writable.
 */
enum PpstStatus ppst_pipeline_generate(const struct PpstPipeline *pipeline,
                                       const char *image_path,
                                       char **out_json);

/**
 * CLIPScore of `text` for the image at `image_path`, using the pipeline's encoder.
 *
 * # Safety
 * As for [`ppst_pipeline_generate`]; `out_score` must be writable.
 */
enum PpstStatus ppst_pipeline_clip_score(const struct PpstPipeline *pipeline,
                                         const char *image_path,
                                         const char *text,
                                         double *out_score);

/**
 * Releases a pipeline. NULL is ignored.
 *
 * # Safety
 * `pipeline` must come from [`ppst_pipeline_open`] and not be used afterwards.
 */
void ppst_pipeline_free(struct PpstPipeline *pipeline);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ppst_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PPST_H */
