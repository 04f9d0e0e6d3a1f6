#ifndef FEDAVG_SDE_H
#define FEDAVG_SDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Covariance construction for the quadratic case.
 */
typedef enum FsCovarianceMode {
  FS_COVARIANCE_MODE_PAPER_VERBATIM = 0,
  FS_COVARIANCE_MODE_EXACT_MOMENT = 1,
} FsCovarianceMode;

/*
 Result of every fallible call.
 */
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  /*
   Null pointer, bad UTF-8 or an out-of-range index.
   */
  FS_STATUS_INVALID_ARGUMENT = 1,
  /*
   The config or object description failed validation.
   */
  FS_STATUS_VALIDATION = 2,
  /*
   A simulation produced non-finite values or a degenerate sample.
   */
  FS_STATUS_NUMERICAL = 3,
  FS_STATUS_IO = 4,
  /*
   A Rust panic was caught at the boundary.
   */
  FS_STATUS_INTERNAL = 5,
} FsStatus;

/*
 Closed-form mean and variance of the one-dimensional quadratic case.
 */
typedef struct FsAnalytic FsAnalytic;

/*
 A federated objective.
 */
typedef struct FsProblem FsProblem;

/*
 A recorded FedAvg run.
 */
typedef struct FsTrajectory FsTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null if none. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *fs_last_error_message(void);

/*
 Forgets the last failure on this thread.
 */
void fs_clear_last_error(void);

/*
 Library version as a static string.
 */
const char *fs_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void fs_string_free(char *s);

/*
 Builds a problem from the JSON `problem` section of an experiment config.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum FsStatus fs_problem_from_json(const char *json_text, struct FsProblem **out);

/*
 # Safety
 `p` must come from [`fs_problem_from_json`] and not have been freed.
 */
void fs_problem_free(struct FsProblem *p);

/*
 Dimension `d`, or 0 for a null handle.

 # Safety
 `p` must be null or a live handle.
 */
size_t fs_problem_dim(const struct FsProblem *p);

/*
 Number of clients, or 0 for a null handle.

 # Safety
 `p` must be null or a live handle.
 */
size_t fs_problem_num_clients(const struct FsProblem *p);

/*
 `F(w)` and `∇F(w)`; `w` and `grad` hold `len = d` values. `grad` may be
 null when only the loss is wanted.

 # Safety
 Pointers must be valid for `len` elements.
 */
enum FsStatus fs_problem_loss_and_gradient(const struct FsProblem *p,
                                           const double *w,
                                           size_t len,
                                           double *loss,
                                           double *grad);

/*
 `L` and `μ` over the box `[lower, upper]`.

 # Safety
 `lower` and `upper` must hold `len` values; outputs must be writable.
 */
enum FsStatus fs_problem_smoothness(const struct FsProblem *p,
                                    const double *lower,
                                    const double *upper,
                                    size_t len,
                                    double *lipschitz,
                                    double *smoothness);

/*
 Closed-form solution for a one-dimensional quadratic case given as JSON
 (`clients`, `eta`, `local_steps`, `w_init`).

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum FsStatus fs_analytic_new(const char *json_text,
                              enum FsCovarianceMode mode,
                              struct FsAnalytic **out);

/*
 # Safety
 `a` must come from [`fs_analytic_new`] and not have been freed.
 */
void fs_analytic_free(struct FsAnalytic *a);

/*
 Mean at time `t`, and both variance forms: the solution of the moment
 ODE and the closed form with `e^{−At}`. Any output may be null.

 # Safety
 `a` must be a live handle; non-null outputs must be writable.
 */
enum FsStatus fs_analytic_moments(const struct FsAnalytic *a,
                                  double t,
                                  double *mean,
                                  double *variance_ode,
                                  double *variance_paper_form);

/*
 Runs FedAvg; `config_json` is a FedAvg config including `seed`.

 # Safety
 `w_init` must hold `len` values; `out` must be writable.
 */
enum FsStatus fs_run_fedavg(const struct FsProblem *p,
                            const char *config_json,
                            const double *w_init,
                            size_t len,
                            struct FsTrajectory **out);

/*
 # Safety
 `t` must come from [`fs_run_fedavg`] and not have been freed.
 */
void fs_trajectory_free(struct FsTrajectory *t);

/*
 Number of records (`rounds + 1`), or 0 for a null handle.

 # Safety
 `t` must be null or a live handle.
 */
size_t fs_trajectory_len(const struct FsTrajectory *t);

/*
 Server state, loss and `‖∇F‖²` after `round` aggregations. `state` holds
 `len = d` values; any output may be null.

 # Safety
 `t` must be a live handle; non-null outputs must be writable.
 */
enum FsStatus fs_trajectory_record(const struct FsTrajectory *t,
                                   size_t round,
                                   double *state,
                                   size_t len,
                                   double *loss,
                                   double *grad_norm_sq);

/*
 The trajectory CSV; release with [`fs_string_free`].

 # Safety
 `t` must be a live handle; `out` must be writable.
 */
enum FsStatus fs_trajectory_csv(const struct FsTrajectory *t, char **out);

/*
 Diagnostics for an experiment config as a JSON array of strings; an
 empty array means the config is runnable. Release with
 [`fs_string_free`].

 # Safety
 `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum FsStatus fs_validate_config(const char *config_json, char **out);

/*
 Runs an experiment config and writes its artifacts and manifest into
 `out_dir`. Nothing is written if the run fails.

 # Safety
 Both arguments must be NUL-terminated strings.
 */
enum FsStatus fs_run_experiment(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDAVG_SDE_H */
