#ifndef QKVLAB_H
#define QKVLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  /**
   * Success.
   */
  QKVLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  QKVLAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * The config failed to parse or validate.
   */
  QKVLAB_STATUS_INVALID_CONFIG = 2,
  /**
   * The run itself failed (I/O, numeric guard).
   */
  QKVLAB_STATUS_RUNTIME = 3,
  /**
   * The provided buffer is too small; retry with the written size.
   */
  QKVLAB_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * A slot or index argument is out of range.
   */
  QKVLAB_STATUS_OUT_OF_RANGE = 5,
} QkvlabStatus;

/**
 * Opaque handle to one completed generation run.
 */
typedef struct QkvlabRun QkvlabRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for the calling thread into `buf`
 * (NUL-terminated, truncating). Returns the full message length in
 * bytes, excluding the NUL. `buf` may be null to query the length.
 */
size_t qkvlab_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qkvlab_version(void);

/**
 * Runs a full generation from a TOML config string. Returns an owned
 * handle (free with [`qkvlab_run_free`]) or null on failure.
 *
 * # Safety
 * `config_toml` must be a valid NUL-terminated UTF-8 string. `status`
 * may be null.
 */
QkvlabRun *qkvlab_run_from_config_str(const char *config_toml, QkvlabStatus *status);

/**
 * Runs a full generation from a TOML config file path.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string. `status` may be null.
 */
QkvlabRun *qkvlab_run_from_config_file(const char *path, QkvlabStatus *status);

/**
 * Frees a run handle. Null is a no-op.
 *
 * # Safety
 * `run` must have come from a `qkvlab_run_from_*` call and not have
 * been freed already.
 */
void qkvlab_run_free(QkvlabRun *run);

/**
 * Copies the NUL-terminated run id into `buf`. Returns the id length
 * in bytes (excluding NUL); `buf` may be null to query.
 *
 * # Safety
 * `run` must be a live handle; `buf` must point to `cap` writable
 * bytes when non-null.
 */
size_t qkvlab_run_id(const QkvlabRun *run, char *buf, size_t cap);

/**
 * Number of generated images (batch slots) in the run.
 *
 * # Safety
 * `run` must be a live handle.
 */
size_t qkvlab_image_count(const QkvlabRun *run);

/**
 * Writes the width and height of one slot's image.
 *
 * # Safety
 * `run` must be a live handle; `width`/`height` must be writable.
 */
QkvlabStatus qkvlab_image_size(const QkvlabRun *run,
                               size_t slot,
                               uint32_t *width,
                               uint32_t *height);

/**
 * Copies one slot's image as 8-bit interleaved RGB rows (the same
 * quantization the PPM writer uses). `buf` needs width*height*3 bytes.
 *
 * # Safety
 * `run` must be a live handle; `buf` must point to `cap` writable bytes.
 */
QkvlabStatus qkvlab_image_pixels_rgb8(const QkvlabRun *run, size_t slot, uint8_t *buf, size_t cap);

/**
 * Copies the consistency metrics as a NUL-terminated JSON string.
 * Returns the JSON length in bytes (excluding NUL); `buf` may be null
 * to query the required capacity.
 *
 * # Safety
 * `run` must be a live handle; `buf` must point to `cap` writable
 * bytes when non-null.
 */
size_t qkvlab_metrics_json(const QkvlabRun *run, char *buf, size_t cap);

/**
 * Number of captured attention-map records in the run.
 *
 * # Safety
 * `run` must be a live handle.
 */
size_t qkvlab_map_count(const QkvlabRun *run);

/**
 * Writes the run's full output tree (images, config echo, metrics,
 * archive when capture is on) under `root_dir/<run_id>`.
 *
 * # Safety
 * `run` must be a live handle; `root_dir` a valid NUL-terminated path.
 */
QkvlabStatus qkvlab_save_outputs(const QkvlabRun *run, const char *root_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QKVLAB_H */
