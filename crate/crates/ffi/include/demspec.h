#ifndef DEMSPEC_H
#define DEMSPEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes of the C API.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_UTF8 = 2,
  DS_STATUS_INVALID_ARGUMENT = 3,
  DS_STATUS_NON_FINITE = 4,
  DS_STATUS_INSUFFICIENT_DATA = 5,
  DS_STATUS_RESOURCE_MISSING = 6,
  DS_STATUS_MALFORMED_INPUT = 7,
  DS_STATUS_IO_ERROR = 8,
  DS_STATUS_BUFFER_TOO_SMALL = 9,
  DS_STATUS_INTERNAL = 10,
} DsStatus;

/*
 Opaque handle to a loaded checkpoint.
 */
typedef struct DsCheckpoint DsCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buffer` (NUL
 terminated, truncated to `len`). Returns the full message length
 including the terminator, or 0 when no error was recorded.

 # Safety
 `buffer` must be null or point to `len` writable bytes.
 */
size_t ds_last_error(char *buffer, size_t len);

/*
 `0.5 * (exp(-eta) * loss + eta)`.

 # Safety
 `out` must be null or writable.
 */
enum DsStatus ds_weighted_loss(double loss, double eta, double *out);

/*
 Sum of the two weighted task losses.

 # Safety
 `out` must be null or writable.
 */
enum DsStatus ds_combined_loss(double mlm_loss,
                               double dem_loss,
                               double eta_mlm,
                               double eta_dem,
                               double *out);

/*
 Writes the partial derivatives with respect to
 `(mlm_loss, dem_loss, eta_mlm, eta_dem)` into `out[0..4]`.

 # Safety
 `out` must be null or point to 4 writable doubles.
 */
enum DsStatus ds_combined_loss_grad(double mlm_loss,
                                    double dem_loss,
                                    double eta_mlm,
                                    double eta_dem,
                                    double *out);

/*
 Bayes-optimal attribute accuracy of the synthetic generator with marker
 rates `own_rate` and `other_rate` and document lengths uniform on
 `[min_len, max_len]`.

 # Safety
 `out` must be null or writable.
 */
enum DsStatus ds_bayes_optimal_ac(double own_rate,
                                  double other_rate,
                                  size_t min_len,
                                  size_t max_len,
                                  double *out);

/*
 Loads a checkpoint directory. Release the handle with
 [`ds_checkpoint_free`].

 # Safety
 `dir` must be null or a NUL-terminated string; `out` must be null or
 writable.
 */
enum DsStatus ds_checkpoint_open(const char *dir, struct DsCheckpoint **out);

/*
 # Safety
 `handle` must be null or come from [`ds_checkpoint_open`], and must not
 be used afterwards.
 */
void ds_checkpoint_free(struct DsCheckpoint *handle);

/*
 Width of one embedding row.

 # Safety
 `handle` must be null or live; `out` must be null or writable.
 */
enum DsStatus ds_checkpoint_hidden_dim(const struct DsCheckpoint *handle, size_t *out);

/*
 Embeds `n_texts` documents into `out`, row-major `n_texts x hidden_dim`.
 `out_len` is the capacity of `out` in doubles.

 # Safety
 `texts` must point to `n_texts` NUL-terminated strings and `out` to
 `out_len` writable doubles.
 */
enum DsStatus ds_checkpoint_embed(const struct DsCheckpoint *handle,
                                  const char *const *texts,
                                  size_t n_texts,
                                  double *out,
                                  size_t out_len);

/*
 Mean silhouette of `n` row-major points of width `dim` under `labels`.

 # Safety
 `x` must point to `n * dim` doubles, `labels` to `n` values and `out`
 must be writable.
 */
enum DsStatus ds_silhouette(const double *x,
                            size_t n,
                            size_t dim,
                            const size_t *labels,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEMSPEC_H */
