#ifndef DIPVAE_H
#define DIPVAE_H

#include <stddef.h>
#include <stdint.h>

typedef enum DvStatus {
  DV_STATUS_OK = 0,
  DV_STATUS_NULL_POINTER = 1,
  DV_STATUS_INVALID_ARGUMENT = 2,
  DV_STATUS_IO = 3,
  DV_STATUS_FORMAT = 4,
  DV_STATUS_SHAPE = 5,
  DV_STATUS_NON_FINITE = 6,
  DV_STATUS_BUFFER_TOO_SMALL = 7,
  DV_STATUS_PANIC = 8,
} DvStatus;

/*
 Shapes dataset handle.
 */
typedef struct DvDataset DvDataset;

/*
 Trained model handle.
 */
typedef struct DvModel DvModel;

typedef struct DvEvalReport {
  double sap;
  double zdiff;
  double recon_error;
  double offdiag_norm;
  uintptr_t active_dims;
} DvEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the most recent failure on this thread; empty if none.
 The pointer stays valid until the next failing call on this thread.
 */
const char *dv_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *dv_version(void);

/*
 Renders the shapes grid and splits it 90/10 with `split_seed`.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum DvStatus dv_dataset_generate(uintptr_t n_x,
                                  uintptr_t n_y,
                                  uintptr_t n_scale,
                                  uintptr_t n_rotation,
                                  uintptr_t canvas,
                                  uint64_t split_seed,
                                  struct DvDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum DvStatus dv_dataset_load(const char *path, struct DvDataset **out);

/*
 # Safety
 `dataset` must be a live handle; `path` a NUL-terminated string.
 */
enum DvStatus dv_dataset_save(const struct DvDataset *dataset, const char *path);

/*
 Number of images, or 0 for NULL.

 # Safety
 `dataset` must be NULL or a live handle.
 */
uintptr_t dv_dataset_len(const struct DvDataset *dataset);

/*
 Number of test-split images, or 0 for NULL.

 # Safety
 `dataset` must be NULL or a live handle.
 */
uintptr_t dv_dataset_test_len(const struct DvDataset *dataset);

/*
 Pixels per image, or 0 for NULL.

 # Safety
 `dataset` must be NULL or a live handle.
 */
uintptr_t dv_dataset_pixels(const struct DvDataset *dataset);

/*
 # Safety
 `dataset` must be NULL or a handle not yet freed.
 */
void dv_dataset_free(struct DvDataset *dataset);

/*
 Loads a model or trainer checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum DvStatus dv_model_load(const char *path, struct DvModel **out);

/*
 Latent dimensionality, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
uintptr_t dv_model_latent_dim(const struct DvModel *model);

/*
 # Safety
 `model` must be NULL or a handle not yet freed.
 */
void dv_model_free(struct DvModel *model);

/*
 Writes the posterior means of the test split, row-major
 `test_len × latent_dim`, into `mu_out`. `written` always receives the
 required length; a smaller `capacity` returns `DV_STATUS_BUFFER_TOO_SMALL`
 without writing.

 # Safety
 `mu_out` must have room for `capacity` doubles (or be NULL when 0);
 `written` must be valid.
 */
enum DvStatus dv_model_encode_test(const struct DvModel *model,
                                   const struct DvDataset *dataset,
                                   double *mu_out,
                                   uintptr_t capacity,
                                   uintptr_t *written);

/*
 SAP, Z-diff (default settings, `seed`), reconstruction error and latent
 covariance statistics on the test split.

 # Safety
 Handles must be live; `out` must be valid.
 */
enum DvStatus dv_model_evaluate(const struct DvModel *model,
                                const struct DvDataset *dataset,
                                uint64_t seed,
                                struct DvEvalReport *out);

/*
 SAP score of external codes. `codes` is `n × d`, `factors` is `n × k`,
 both row-major; `is_classification[j] != 0` marks categorical factors
 (NULL treats every factor as continuous).

 # Safety
 Buffers must hold the stated number of elements; `score_out` must be valid.
 */
enum DvStatus dv_sap_score(const double *codes,
                           uintptr_t n,
                           uintptr_t d,
                           const double *factors,
                           uintptr_t k,
                           const uint8_t *is_classification,
                           double *score_out);

/*
 Z-diff score in `[0, 100]` of external codes with default settings.

 # Safety
 Buffers must hold the stated number of elements; `score_out` must be valid.
 */
enum DvStatus dv_zdiff_score(const double *codes,
                             uintptr_t n,
                             uintptr_t d,
                             const double *factors,
                             uintptr_t k,
                             uint64_t seed,
                             double *score_out);

/*
 Mean over rows of `KL(N(μ, diag σ²) ‖ N(0, I))` for `n × d` row-major
 means and variances.

 # Safety
 `mu` and `var` must hold `n·d` doubles; `out` must be valid.
 */
enum DvStatus dv_kl_to_standard_normal(const double *mu,
                                       const double *var,
                                       uintptr_t n,
                                       uintptr_t d,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIPVAE_H */
