#ifndef GRACE_H
#define GRACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GraceStatus {
  GRACE_STATUS_OK = 0,
  // Bad configuration or argument value.
  GRACE_STATUS_USAGE = 1,
  // Unreadable, malformed or inconsistent data.
  GRACE_STATUS_DATA = 2,
  // Non-finite values during training or evaluation.
  GRACE_STATUS_NUMERIC = 3,
  GRACE_STATUS_NULL_ARGUMENT = 4,
  // A Rust panic was caught at the boundary.
  GRACE_STATUS_INTERNAL = 5,
} GraceStatus;

// A dataset with its context network and, for synthetic data, ground truth.
typedef struct GraceBundle GraceBundle;

// Held-out metrics of one run.
typedef struct GraceReport GraceReport;

// A configuration plus model and optimizer state.
typedef struct GraceRun GraceRun;

typedef struct GraceMetrics {
  size_t n_real;
  size_t n_gen;
  // False when the real mean profile is flat and R² is undefined.
  bool r2_defined;
  double r2;
  double rmse;
  double mmd;
} GraceMetrics;

typedef struct GraceOracle {
  double mean_abs_corr;
  double target_accuracy;
  size_t shd;
  size_t best_shd;
  double best_tau;
} GraceOracle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *grace_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *grace_last_error(void);

// Generates a synthetic benchmark with default settings apart from the
// given sizes.
//
// # Safety
// `out` must be a valid pointer to write a handle into.
enum GraceStatus grace_bundle_synth(size_t p,
                                    size_t d,
                                    size_t n_obs,
                                    size_t n_per_intervention,
                                    size_t doubles,
                                    uint64_t seed,
                                    struct GraceBundle **out);

// # Safety
// `dir` must be a NUL-terminated path; `out` a valid pointer.
enum GraceStatus grace_bundle_open(const char *dir, struct GraceBundle **out);

// Writes the bundle layout into `dir`, which must not hold another bundle.
//
// # Safety
// `bundle` must be a live handle; `dir` a NUL-terminated path.
enum GraceStatus grace_bundle_write(const struct GraceBundle *bundle, const char *dir);

// Number of observed features, or 0 for a NULL handle.
//
// # Safety
// `bundle` must be NULL or a live handle.
size_t grace_bundle_features(const struct GraceBundle *bundle);

// # Safety
// `bundle` must be NULL or a handle not yet freed.
void grace_bundle_free(struct GraceBundle *bundle);

// Creates an untrained run. `config` holds `key = value` lines and may be
// NULL for defaults.
//
// # Safety
// `bundle` must be a live handle, `config` NULL or NUL-terminated, `out` valid.
enum GraceStatus grace_run_new(const struct GraceBundle *bundle,
                               const char *config,
                               struct GraceRun **out);

// Trains until `until` epochs are complete (at most the configured count).
// `bundle` must be the one the run was created from.
//
// # Safety
// `run` and `bundle` must be live handles.
enum GraceStatus grace_run_train(struct GraceRun *run,
                                 const struct GraceBundle *bundle,
                                 size_t until);

// Completed epochs, or 0 for a NULL handle.
//
// # Safety
// `run` must be NULL or a live handle.
size_t grace_run_epoch(const struct GraceRun *run);

// Latent dimension, or 0 for a NULL handle.
//
// # Safety
// `run` must be NULL or a live handle.
size_t grace_run_latent_dim(const struct GraceRun *run);

// Copies the learned p×p adjacency, row-major, into `out` of length `len`.
//
// # Safety
// `run` must be a live handle and `out` point to `len` writable doubles.
enum GraceStatus grace_run_dag(const struct GraceRun *run, double *out, size_t len);

// Writes `config.cfg`, `checkpoint.bin` and `train_log.csv` into `dir`,
// creating it if needed.
//
// # Safety
// `run` must be a live handle; `dir` a NUL-terminated path.
enum GraceStatus grace_run_save(const struct GraceRun *run, const char *dir);

// Reopens a saved run against its bundle.
//
// # Safety
// `dir` must be NUL-terminated, `bundle` a live handle, `out` valid.
enum GraceStatus grace_run_open(const char *dir,
                                const struct GraceBundle *bundle,
                                struct GraceRun **out);

// # Safety
// `run` must be NULL or a handle not yet freed.
void grace_run_free(struct GraceRun *run);

// Scores the run on the held-out split of `bundle`.
//
// # Safety
// `run` and `bundle` must be live handles, `out` valid.
enum GraceStatus grace_run_evaluate(const struct GraceRun *run,
                                    const struct GraceBundle *bundle,
                                    struct GraceReport **out);

// Number of scored interventional regimes, or 0 for a NULL handle.
//
// # Safety
// `report` must be NULL or a live handle.
size_t grace_report_len(const struct GraceReport *report);

// # Safety
// `report` must be a live handle and `out` valid.
enum GraceStatus grace_report_row(const struct GraceReport *report,
                                  size_t index,
                                  struct GraceMetrics *out);

// Oracle scores; `GRACE_STATUS_DATA` when the bundle has no ground truth or
// scoring was skipped.
//
// # Safety
// `report` must be a live handle and `out` valid.
enum GraceStatus grace_report_oracle(const struct GraceReport *report, struct GraceOracle *out);

// Writes `metrics.csv` and, when present, `oracle.json` into `dir`.
//
// # Safety
// `report` must be a live handle; `dir` a NUL-terminated existing directory.
enum GraceStatus grace_report_write(const struct GraceReport *report, const char *dir);

// # Safety
// `report` must be NULL or a handle not yet freed.
void grace_report_free(struct GraceReport *report);

// Worst relative gradient error of the training loss on a small model,
// over both mechanisms and all encoder kinds.
//
// # Safety
// `out` must be a valid pointer.
enum GraceStatus grace_gradcheck(double eps, uint64_t seed, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRACE_H */
