#ifndef NHLAB_H
#define NHLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NhlabStatus {
  NHLAB_STATUS_OK = 0,
  NHLAB_STATUS_NULL_POINTER = 1,
  NHLAB_STATUS_INVALID_ARGUMENT = 2,
  NHLAB_STATUS_CONFIG = 3,
  NHLAB_STATUS_COMPUTE = 4,
  NHLAB_STATUS_BUFFER_TOO_SMALL = 5,
  NHLAB_STATUS_NOT_FOUND = 6,
  NHLAB_STATUS_IO = 7,
  NHLAB_STATUS_PANIC = 8,
} NhlabStatus;

// A section map at fixed parameters.
typedef struct NhlabModel NhlabModel;

// The in-memory outputs of one experiment run.
typedef struct NhlabRun NhlabRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *nhlab_last_error(void);

// Creates a model; `steps` must be a power of two and `order` 2 or 4.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum NhlabStatus nhlab_model_new(double epsilon,
                                 double mu,
                                 uintptr_t steps,
                                 uint8_t order,
                                 struct NhlabModel **out);

// # Safety
// `m` must be null or a handle from [`nhlab_model_new`] not yet freed.
void nhlab_model_free(struct NhlabModel *m);

// Applies the section map `n` times (inverse map for negative `n`) to the
// point (θ₁, r₁, θ₂, r₂) in `x`, writing four values to `y`. Angles are not
// reduced modulo 2π.
//
// # Safety
// `m` must be a live handle; `x` and `y` must point to four doubles.
enum NhlabStatus nhlab_section_map(const struct NhlabModel *m,
                                   const double *x,
                                   int64_t n,
                                   double *y);

// One step of the section map with its derivative: the image goes to `y`
// (four doubles) and the 4×4 Jacobian to `jac`, row-major.
//
// # Safety
// `m` must be a live handle; `x` and `y` must point to four doubles and
// `jac` to sixteen.
enum NhlabStatus nhlab_section_jacobian(const struct NhlabModel *m,
                                        const double *x,
                                        double *y,
                                        double *jac);

// H at angles `theta` and actions `r` (three doubles each).
//
// # Safety
// `m` must be a live handle; `theta` and `r` must point to three doubles and
// `out` to one.
enum NhlabStatus nhlab_hamiltonian(const struct NhlabModel *m,
                                   const double *theta,
                                   const double *r,
                                   double *out);

// Upper branch r₁ = 2√ε sin(θ₁/2) of the pendulum separatrix.
double nhlab_separatrix_r1(double theta1, double epsilon);

// Runs an experiment. `command` is a subcommand name such as
// "pendulum-check"; `config` is a sectioned key-value text overriding the
// defaults, or null for the defaults.
//
// # Safety
// `command` must be a NUL-terminated string, `config` null or one, and
// `out` a valid pointer to writable storage for a handle.
enum NhlabStatus nhlab_run(const char *command, const char *config, struct NhlabRun **out);

// 1 when every check of the run passed, 0 otherwise, −1 for a null handle.
//
// # Safety
// `run` must be null or a live handle.
int32_t nhlab_run_passed(const struct NhlabRun *run);

// Number of checks evaluated by the run.
//
// # Safety
// `run` must be null or a live handle.
uintptr_t nhlab_run_check_count(const struct NhlabRun *run);

// Margin of check `i` (positive when it holds), NaN when out of range.
//
// # Safety
// `run` must be null or a live handle.
double nhlab_run_check_margin(const struct NhlabRun *run, uintptr_t i);

// Copies output file `name` (e.g. "run.toml") with a terminating NUL into
// `buf` of capacity `cap`. The required size including the NUL is stored in
// `needed` when it is non-null; a short buffer yields BufferTooSmall.
//
// # Safety
// `run` must be a live handle, `name` a NUL-terminated string and `buf`
// null or writable for `cap` bytes.
enum NhlabStatus nhlab_run_file(const struct NhlabRun *run,
                                const char *name,
                                char *buf,
                                uintptr_t cap,
                                uintptr_t *needed);

// Writes every output file of the run into directory `dir`.
//
// # Safety
// `run` must be a live handle and `dir` a NUL-terminated string.
enum NhlabStatus nhlab_run_write(const struct NhlabRun *run, const char *dir);

// # Safety
// `run` must be null or a handle from [`nhlab_run`] not yet freed.
void nhlab_run_free(struct NhlabRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NHLAB_H */
