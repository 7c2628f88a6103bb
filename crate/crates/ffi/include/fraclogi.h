#ifndef FRACLOGI_H
#define FRACLOGI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlgStatus {
  FLG_STATUS_OK = 0,
  // A required pointer argument was null.
  FLG_STATUS_NULL_POINTER = 1,
  // Bad parameter, grid, field length or field values.
  FLG_STATUS_INVALID_ARGUMENT = 2,
  // An iterative solver failed to converge or diverged.
  FLG_STATUS_SOLVER_FAILURE = 3,
  // The steady problem has no positive solution at this λ.
  FLG_STATUS_NO_POSITIVE_SOLUTION = 4,
  // A Rust panic was caught at the boundary.
  FLG_STATUS_INTERNAL = 5,
} FlgStatus;

// Fate of an evolution run.
typedef enum FlgClassification {
  FLG_CLASSIFICATION_RUNNING = 0,
  FLG_CLASSIFICATION_STABILIZED = 1,
  FLG_CLASSIFICATION_BLOWUP_FINITE = 2,
  FLG_CLASSIFICATION_BLOWUP_INFINITE = 3,
  FLG_CLASSIFICATION_BLOWUP_SUSPECTED = 4,
  FLG_CLASSIFICATION_EXTINCT = 5,
  FLG_CLASSIFICATION_HORIZON_REACHED = 6,
} FlgClassification;

// Discretization grid with its domain, refuge and exterior masks.
typedef struct FlgGrid FlgGrid;

// Assembled nonlocal operator on a grid's interior nodes.
typedef struct FlgOperator FlgOperator;

// Operator, absorption and exponents of one steady or evolution problem.
typedef struct FlgProblem FlgProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *flg_last_error(void);

// Library version as a static nul-terminated string.
const char *flg_version(void);

// Uniform 1D grid on `[lo, hi]` with refuge `[refuge_lo, refuge_hi]` and
// `nodes` nodes including the two boundary nodes.
//
// # Safety
// `out` must be valid for writes.
enum FlgStatus flg_grid_new_interval(double lo,
                                     double hi,
                                     double refuge_lo,
                                     double refuge_hi,
                                     size_t nodes,
                                     struct FlgGrid **out);

// Uniform 2D grid on the square `[lo, hi]²` with refuge `[refuge_lo, refuge_hi]²`
// and `nodes_per_axis` nodes per axis.
//
// # Safety
// `out` must be valid for writes.
enum FlgStatus flg_grid_new_square(double lo,
                                   double hi,
                                   double refuge_lo,
                                   double refuge_hi,
                                   size_t nodes_per_axis,
                                   struct FlgGrid **out);

// Number of grid nodes, the length of every field; 0 for a null handle.
//
// # Safety
// `grid` must be null or a live handle.
size_t flg_grid_node_count(const struct FlgGrid *grid);

// Spatial dimension (1 or 2); 0 for a null handle.
//
// # Safety
// `grid` must be null or a live handle.
size_t flg_grid_dimension(const struct FlgGrid *grid);

// Writes the coordinates of every node, `dimension` values per node.
//
// # Safety
// `grid` must be a live handle and `out` valid for `len` writes.
enum FlgStatus flg_grid_coordinates(const struct FlgGrid *grid, double *out, size_t len);

// # Safety
// `grid` must be null or a handle from `flg_grid_new_*` not yet freed.
void flg_grid_free(struct FlgGrid *grid);

// Assembles the operator with fractional order `s ∈ (0, 1)` and `p > 1`.
//
// # Safety
// `grid` must be a live handle and `out` valid for writes.
enum FlgStatus flg_operator_new(const struct FlgGrid *grid,
                                double s,
                                double p,
                                struct FlgOperator **out);

// Applies the operator to `u`; both arrays hold `len` node values.
//
// # Safety
// `op` must be a live handle, `u` valid for `len` reads and `out` for `len` writes.
enum FlgStatus flg_operator_apply(const struct FlgOperator *op,
                                  const double *u,
                                  double *out,
                                  size_t len);

// Gagliardo energy `‖u‖^p` of `u`.
//
// # Safety
// `op` must be a live handle, `u` valid for `len` reads and `energy` for a write.
enum FlgStatus flg_operator_energy(const struct FlgOperator *op,
                                   const double *u,
                                   size_t len,
                                   double *energy);

// First eigenpair on the interior (`on_refuge = false`) or on the refuge.
// `eigenfield` may be null; otherwise it receives `len` node values.
//
// # Safety
// `op` must be a live handle, `lambda` valid for a write and `eigenfield`
// null or valid for `len` writes.
enum FlgStatus flg_first_eigen(const struct FlgOperator *op,
                               bool on_refuge,
                               double *lambda,
                               double *eigenfield,
                               size_t len);

// Problem with absorption `b0` outside the refuge, source `λ u^q` and
// absorption exponent `r`. The operator handle may be freed afterwards.
//
// # Safety
// `op` must be a live handle and `out` valid for writes.
enum FlgStatus flg_problem_new(const struct FlgOperator *op,
                               double b0,
                               double lambda,
                               double q,
                               double r,
                               struct FlgProblem **out);

// # Safety
// `problem` must be null or a handle from `flg_problem_new` not yet freed.
void flg_problem_free(struct FlgProblem *problem);

// # Safety
// `op` must be null or a handle from `flg_operator_new` not yet freed.
void flg_operator_free(struct FlgOperator *op);

// Positive steady state. `init` may be null (default start) or hold `len`
// node values. `residual` may be null.
//
// # Safety
// `problem` must be a live handle; the arrays valid for `len` elements.
enum FlgStatus flg_solve_steady(const struct FlgProblem *problem,
                                const double *init,
                                double *out,
                                size_t len,
                                double *residual);

// Guaranteed existence horizon `T_*` and its truncation level (`NAN` when
// no finite maximizer exists) for the datum `u0`.
//
// # Safety
// `problem` must be a live handle, `u0` valid for `len` reads and both
// outputs for a write.
enum FlgStatus flg_horizon(const struct FlgProblem *problem,
                           const double *u0,
                           size_t len,
                           double *t_star,
                           double *truncation);

// Runs the implicit scheme from `u0` up to time `horizon` with step `dt`
// (`dt ≤ 0` selects the default) and writes the final field, the final
// time and the classification of the run.
//
// # Safety
// `problem` must be a live handle, `u0` valid for `len` reads, `out` for
// `len` writes and the scalar outputs for a write.
enum FlgStatus flg_evolve(const struct FlgProblem *problem,
                          const double *u0,
                          size_t len,
                          double horizon,
                          double dt,
                          double *out,
                          double *final_time,
                          enum FlgClassification *classification);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRACLOGI_H */
