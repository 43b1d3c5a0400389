#ifndef NFSAILS_H
#define NFSAILS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NfsProposalMode {
  NFS_PROPOSAL_MODE_APPROX = 0,
  NFS_PROPOSAL_MODE_EXACT = 1,
} NfsProposalMode;

typedef enum NfsStatus {
  NFS_STATUS_OK = 0,
  NFS_STATUS_NULL_POINTER = 1,
  NFS_STATUS_INVALID_ARGUMENT = 2,
  NFS_STATUS_IO = 3,
  NFS_STATUS_VERSION_MISMATCH = 4,
  NFS_STATUS_PARSE = 5,
  NFS_STATUS_NUMERICAL = 6,
  NFS_STATUS_PANIC = 7,
} NfsStatus;

// Opaque handle to a trained flow.
typedef struct NfsModel NfsModel;

typedef struct NfsSamplerConfig {
  double eps;
  // Probability of the local kernel at each step.
  double p;
  size_t n_samples;
  size_t burn_in;
  size_t thin;
  // An `NfsProposalMode` value.
  uint32_t mode;
  uint64_t seed;
  bool adapt_step_size;
} NfsSamplerConfig;

// Kernel counts after burn-in. Rates are NaN when nothing was proposed.
typedef struct NfsDiagnostics {
  uint64_t rmmala_proposed;
  uint64_t rmmala_accepted;
  uint64_t imh_proposed;
  uint64_t imh_accepted;
  uint64_t invalid_proposals;
  double rmmala_acceptance_rate;
  double imh_acceptance_rate;
  double step_size;
} NfsDiagnostics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum NfsStatus nfs_model_load(const char *path, struct NfsModel **out);

// Parses checkpoint text. On success `*out` owns a new handle.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum NfsStatus nfs_model_from_string(const char *text, struct NfsModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void nfs_model_free(struct NfsModel *model);

// Dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t nfs_model_dim(const struct NfsModel *model);

// `x = f(z)` and `log |det J_f(z)|`. `log_det` may be null.
//
// # Safety
// `z` and `x` must hold `dim` doubles.
enum NfsStatus nfs_model_forward(const struct NfsModel *model,
                                 const double *z,
                                 double *x,
                                 double *log_det);

// `z = f⁻¹(x)` and `log |det J_{f⁻¹}(x)|`. `log_det` may be null.
//
// # Safety
// `x` and `z` must hold `dim` doubles.
enum NfsStatus nfs_model_inverse(const struct NfsModel *model,
                                 const double *x,
                                 double *z,
                                 double *log_det);

// Gradient of the learnt data log-density evaluated at `f(z)`.
//
// # Safety
// `z` and `score` must hold `dim` doubles.
enum NfsStatus nfs_model_latent_score(const struct NfsModel *model, const double *z, double *score);

// Learnt log-density `log q_X(x)`.
//
// # Safety
// `x` must hold `dim` doubles and `out` be valid.
enum NfsStatus nfs_model_log_density(const struct NfsModel *model, const double *x, double *out);

// Row-major `J_f(z)`.
//
// # Safety
// `z` must hold `dim` doubles and `jacobian` `dim * dim`.
enum NfsStatus nfs_model_jacobian(const struct NfsModel *model, const double *z, double *jacobian);

// Library defaults: `eps = 0.1`, `p = 0.9`, 1000 samples after 1000
// burn-in steps, approximate proposals.
struct NfsSamplerConfig nfs_sampler_config_default(void);

// `n` draws of `f(z)`, `z ~ N(0, I)`. `latent` may be null.
//
// # Safety
// `samples` (and `latent` when set) must hold `n * dim` doubles.
enum NfsStatus nfs_sample_naive(const struct NfsModel *model,
                                size_t n,
                                uint64_t seed,
                                double *samples,
                                double *latent);

// Runs one chain of the latent sampler. `latent` and `diagnostics` may be
// null.
//
// # Safety
// `config` must be valid; `samples` (and `latent` when set) must hold
// `config->n_samples * dim` doubles.
enum NfsStatus nfs_sample_sails(const struct NfsModel *model,
                                const struct NfsSamplerConfig *config,
                                double *samples,
                                double *latent,
                                struct NfsDiagnostics *diagnostics);

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *nfs_last_error_message(void);

// NUL-terminated crate version.
const char *nfs_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NFSAILS_H */
