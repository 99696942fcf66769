#ifndef MFLQ_H
#define MFLQ_H

#pragma once

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MflqError {
  MFLQ_ERROR_OK = 0,
  MFLQ_ERROR_NULL_POINTER = 1,
  MFLQ_ERROR_INVALID_UTF8 = 2,
  MFLQ_ERROR_INVALID_INPUT = 3,
  MFLQ_ERROR_UNKNOWN_MATRIX = 4,
  MFLQ_ERROR_BUFFER_TOO_SMALL = 5,
  MFLQ_ERROR_INTERNAL = 6,
} MflqError;

// Problem class to solve for.
typedef enum MflqMode {
  MFLQ_MODE_CONTROL = 0,
  MFLQ_MODE_NASH_OPEN = 1,
  MFLQ_MODE_NASH_CLOSED = 2,
  MFLQ_MODE_ZEROSUM_OPEN = 3,
  MFLQ_MODE_ZEROSUM_CLOSED = 4,
} MflqMode;

// Outcome of a solve.
typedef enum MflqStatus {
  MFLQ_STATUS_SOLVED = 0,
  MFLQ_STATUS_NOT_STATIC_STABILIZING = 1,
  MFLQ_STATUS_PSD_VIOLATED = 2,
  MFLQ_STATUS_MAX_ITERATIONS = 3,
  MFLQ_STATUS_DIVERGED = 4,
} MflqStatus;

// Validated problem plus the solver options from its JSON.
typedef struct MflqProblem MflqProblem;

// Solver output for one problem and mode.
typedef struct MflqSolution MflqSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the next call.
const char *mflq_last_error(void);

// Library version as a static string.
const char *mflq_version(void);

// Parses and validates a problem from JSON text.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MflqError mflq_problem_from_json(const char *json, struct MflqProblem **out);

// Releases a problem; NULL is ignored.
//
// # Safety
// `p` must come from [`mflq_problem_from_json`] and not be used afterwards.
void mflq_problem_free(struct MflqProblem *p);

// State and control dimensions (`m2` is 0 for a control problem).
//
// # Safety
// All pointers must be valid.
enum MflqError mflq_problem_dims(const struct MflqProblem *p, size_t *n, size_t *m1, size_t *m2);

// Solves `p` in `mode`. A solution handle is produced whenever the solver ran,
// certified or not; inspect it with [`mflq_solution_status`].
//
// # Safety
// `p` must be a live problem and `out` a valid pointer.
enum MflqError mflq_solve(const struct MflqProblem *p,
                          enum MflqMode mode,
                          struct MflqSolution **out);

// Releases a solution; NULL is ignored.
//
// # Safety
// `s` must come from [`mflq_solve`] and not be used afterwards.
void mflq_solution_free(struct MflqSolution *s);

// Solver status of `s`.
//
// # Safety
// `s` and `status` must be valid.
enum MflqError mflq_solution_status(const struct MflqSolution *s, enum MflqStatus *status);

// Mode the solution was computed in.
//
// # Safety
// `s` and `mode` must be valid.
enum MflqError mflq_solution_mode(const struct MflqSolution *s, enum MflqMode *mode);

// Copies the named matrix (e.g. `"Theta"`, `"P_hat"`) row-major into `buf`.
//
// `rows`/`cols` always receive the shape, so a call with `len == 0` queries it;
// `BufferTooSmall` is returned if `len < rows * cols`.
//
// # Safety
// `name` must be NUL-terminated, `rows`/`cols` valid, and `buf` valid for `len` doubles.
enum MflqError mflq_solution_matrix(const struct MflqSolution *s,
                                    const char *name,
                                    double *buf,
                                    size_t len,
                                    size_t *rows,
                                    size_t *cols);

// Full report as JSON; release it with [`mflq_string_free`].
//
// # Safety
// `s` and `out` must be valid.
enum MflqError mflq_solution_to_json(const struct MflqSolution *s, char **out);

// Recomputes the equilibrium certificate; `passed` receives 1 or 0.
//
// # Safety
// All pointers must be valid; `s` must have been solved from `p`.
enum MflqError mflq_solution_verify(const struct MflqProblem *p,
                                    const struct MflqSolution *s,
                                    bool convexity,
                                    int32_t *passed);

// Releases a string returned by this library; NULL is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void mflq_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFLQ_H */
