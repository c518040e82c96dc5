#ifndef APPTRANS_H
#define APPTRANS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI entry point.
 */
typedef enum {
  /**
   * Success.
   */
  ApptransOk = 0,
  /**
   * A pointer argument was null or a value was out of range.
   */
  ApptransInvalidArgument = 1,
  /**
   * File could not be read, written, decoded or parsed.
   */
  ApptransIoError = 2,
  /**
   * The operation is undefined for these inputs (size mismatch, empty).
   */
  ApptransNumericError = 3,
} ApptransStatus;

/**
 * Opaque RGB image handle (32-bit float channels in [0,1]).
 */
typedef struct ApptransImage ApptransImage;

/**
 * Opaque handle to a fitted color-transfer spline.
 */
typedef struct ApptransTransfer ApptransTransfer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on the calling thread, or an
 * empty string when the last call succeeded. The pointer stays valid until
 * the next FFI call on the same thread.
 */
const char *apptrans_last_error_message(void);

/**
 * Loads an RGB(A) PNG. On success writes a new handle to `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
ApptransStatus apptrans_image_load_png(const char *path, ApptransImage **out);

/**
 * Saves the image as an 8-bit RGB PNG.
 *
 * # Safety
 * `image` must be a live handle; `path` a valid NUL-terminated string.
 */
ApptransStatus apptrans_image_save_png(const ApptransImage *image, const char *path);

/**
 * Image width in pixels; 0 for a null handle.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
uint32_t apptrans_image_width(const ApptransImage *image);

/**
 * Image height in pixels; 0 for a null handle.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
uint32_t apptrans_image_height(const ApptransImage *image);

/**
 * Releases an image handle. Null is ignored.
 *
 * # Safety
 * `image` must be null or a handle not freed before.
 */
void apptrans_image_free(ApptransImage *image);

/**
 * Loads a fitted transfer from its versioned text file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
ApptransStatus apptrans_transfer_load(const char *path, ApptransTransfer **out);

/**
 * Writes the transfer to its versioned text form (round-trips bit-exactly).
 *
 * # Safety
 * `transfer` must be a live handle; `path` a valid NUL-terminated string.
 */
ApptransStatus apptrans_transfer_save(const ApptransTransfer *transfer, const char *path);

/**
 * Releases a transfer handle. Null is ignored.
 *
 * # Safety
 * `transfer` must be null or a handle not freed before.
 */
void apptrans_transfer_free(ApptransTransfer *transfer);

/**
 * Applies the transfer to every foreground pixel of `image` (the alpha
 * mask when the source PNG had one, every pixel otherwise) and writes a new
 * image handle to `out`.
 *
 * # Safety
 * `transfer` and `image` must be live handles and `out` a valid pointer.
 */
ApptransStatus apptrans_transfer_apply(const ApptransTransfer *transfer,
                                       const ApptransImage *image,
                                       ApptransImage **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APPTRANS_H */
