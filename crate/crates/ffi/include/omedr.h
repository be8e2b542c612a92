#ifndef OMEDR_H
#define OMEDR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Bit set in the `flags` output of [`omedr_identify`] when the rates were
// clamped into the valid region.
#define OMEDR_FLAG_CLAMPED 1

// Bit set when the extreme groups have equal means.
#define OMEDR_FLAG_NO_SEPARATION 2

typedef enum OmedrStatus {
  OMEDR_STATUS_OK = 0,
  OMEDR_STATUS_NULL_POINTER = 1,
  OMEDR_STATUS_INVALID_ARGUMENT = 2,
  OMEDR_STATUS_SHAPE_MISMATCH = 3,
  OMEDR_STATUS_DOMAIN = 4,
  OMEDR_STATUS_MISSING_COMPONENT = 5,
  OMEDR_STATUS_INVALID_CONFIG = 6,
  OMEDR_STATUS_PARSE = 7,
  OMEDR_STATUS_INVALID_DATA = 8,
  OMEDR_STATUS_DIVERGENCE = 9,
  OMEDR_STATUS_IO = 10,
  OMEDR_STATUS_BUFFER_TOO_SMALL = 11,
  OMEDR_STATUS_PANIC = 12,
} OmedrStatus;

typedef enum OmedrLoss {
  OMEDR_LOSS_SQUARED = 0,
  // Uses the `eps` argument as the log floor.
  OMEDR_LOSS_CROSS_ENTROPY = 1,
} OmedrLoss;

typedef enum OmedrEstimator {
  OMEDR_ESTIMATOR_NAIVE = 0,
  OMEDR_ESTIMATOR_EIB = 1,
  OMEDR_ESTIMATOR_IPS = 2,
  OMEDR_ESTIMATOR_DR = 3,
  OMEDR_ESTIMATOR_OME_NAIVE = 4,
  OMEDR_ESTIMATOR_OME_EIB = 5,
  OMEDR_ESTIMATOR_OME_IPS = 6,
  OMEDR_ESTIMATOR_OME_DR = 7,
} OmedrEstimator;

typedef enum OmedrMatrix {
  OMEDR_MATRIX_GAMMA = 0,
  OMEDR_MATRIX_FIVE_SCALE = 1,
  OMEDR_MATRIX_PREDICTION = 2,
  OMEDR_MATRIX_PROPENSITY_TRUE = 3,
  OMEDR_MATRIX_PROPENSITY_HAT = 4,
  OMEDR_MATRIX_OBSERVED_MASK = 5,
  OMEDR_MATRIX_TRUE_RATINGS = 6,
  OMEDR_MATRIX_OBSERVED_RATINGS = 7,
  OMEDR_MATRIX_NOISY_RATINGS = 8,
} OmedrMatrix;

// A generated benchmark instance.
typedef struct OmedrInstance OmedrInstance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *omedr_version(void);

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into the library on the same thread.
const char *omedr_last_error_message(void);

// Loss of a single prediction against a binary label.
//
// # Safety
// `out` must be writable.
enum OmedrStatus omedr_point_loss(enum OmedrLoss loss,
                                  double eps,
                                  double pred,
                                  uint8_t label,
                                  double *out);

// Noise-corrected loss of a prediction against an observed noisy label.
//
// # Safety
// `out` must be writable.
enum OmedrStatus omedr_surrogate_loss(enum OmedrLoss loss,
                                      double eps,
                                      double pred,
                                      uint8_t observed_label,
                                      double rho01,
                                      double rho10,
                                      double *out);

// Evaluates one inaccuracy estimator.
//
// `p_hat` and `e_bar` may be NULL when the estimator does not use them.
// Propensities are clipped below at 0.05. The flip rates are read only by
// the noise-corrected estimators.
//
// # Safety
// Every non-NULL matrix pointer must reference `n_users * n_items`
// readable doubles; `out` must be writable.
enum OmedrStatus omedr_estimate(enum OmedrEstimator estimator,
                                size_t n_users,
                                size_t n_items,
                                const double *observed_mask,
                                const double *observed_ratings,
                                const double *predictions,
                                const double *p_hat,
                                const double *e_bar,
                                double rho01,
                                double rho10,
                                enum OmedrLoss loss,
                                double eps,
                                double *out);

// Identifies the flip rates from a noisy positive-rate matrix using the
// mean of its `k` lowest and `k` highest entries.
//
// # Safety
// `q` must reference `n_users * n_items` readable doubles; the rate
// outputs must be writable; `flags` may be NULL.
enum OmedrStatus omedr_identify(const double *q,
                                size_t n_users,
                                size_t n_items,
                                size_t k,
                                double *out_rho01,
                                double *out_rho10,
                                uint32_t *flags);

// Pooled AUC of `len` scores against 0/1 labels.
//
// # Safety
// `scores` and `labels` must reference `len` readable values; `out` must
// be writable.
enum OmedrStatus omedr_auc(const double *scores, const uint8_t *labels, size_t len, double *out);

// NDCG@k averaged over users (rows) with at least one positive.
//
// # Safety
// `scores` and `labels` must reference `n_users * n_items` readable
// values; `out` must be writable.
enum OmedrStatus omedr_ndcg_at_k(const double *scores,
                                 const uint8_t *labels,
                                 size_t n_users,
                                 size_t n_items,
                                 size_t k,
                                 double *out);

// Recall@k averaged over users (rows) with at least one positive.
//
// # Safety
// Same as [`omedr_ndcg_at_k`].
enum OmedrStatus omedr_recall_at_k(const double *scores,
                                   const uint8_t *labels,
                                   size_t n_users,
                                   size_t n_items,
                                   size_t k,
                                   double *out);

// Generates a benchmark instance from a `key = value` spec. An empty
// string uses the defaults. Release it with [`omedr_instance_free`].
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
enum OmedrStatus omedr_instance_generate(const char *config, struct OmedrInstance **out);

// # Safety
// `h` must be a live handle; the outputs must be writable.
enum OmedrStatus omedr_instance_dims(const struct OmedrInstance *h,
                                     size_t *n_users,
                                     size_t *n_items);

// Copies one instance matrix row-major into `buf`, which must hold at
// least `n_users * n_items` doubles.
//
// # Safety
// `h` must be a live handle; `buf` must reference `len` writable doubles.
enum OmedrStatus omedr_instance_copy_matrix(const struct OmedrInstance *h,
                                            enum OmedrMatrix which,
                                            double *buf,
                                            size_t len);

// Mean clean loss of the instance's prediction matrix.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum OmedrStatus omedr_instance_true_inaccuracy(const struct OmedrInstance *h,
                                                enum OmedrLoss loss,
                                                double eps,
                                                double *out);

// Flip rates the instance was generated with.
//
// # Safety
// `h` must be a live handle; the outputs must be writable.
enum OmedrStatus omedr_instance_rho(const struct OmedrInstance *h, double *rho01, double *rho10);

// Releases a handle. NULL is ignored.
//
// # Safety
// `h` must be NULL or a handle not yet freed.
void omedr_instance_free(struct OmedrInstance *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OMEDR_H */
