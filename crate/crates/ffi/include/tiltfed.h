#ifndef TILTFED_H
#define TILTFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfWeights {
  TF_WEIGHTS_UNIFORM = 0,
  TF_WEIGHTS_SAMPLE_SIZE = 1,
  TF_WEIGHTS_INVERSE_VARIANCE = 2,
} TfWeights;

// Status codes. Values 2 to 8 match the CLI exit codes.
typedef enum TfStatus {
  TF_STATUS_OK = 0,
  TF_STATUS_NULL_POINTER = 1,
  TF_STATUS_CONFIG = 2,
  TF_STATUS_DATA = 3,
  TF_STATUS_NUMERIC = 4,
  TF_STATUS_SINGULAR = 5,
  TF_STATUS_SOLVER = 6,
  TF_STATUS_PROTOCOL = 7,
  TF_STATUS_IO = 8,
  TF_STATUS_PANIC = 9,
} TfStatus;

typedef enum TfFamily {
  TF_FAMILY_LOGISTIC = 0,
  TF_FAMILY_GAUSSIAN = 1,
} TfFamily;

// Opaque simulated network of sites.
typedef struct TfNetwork TfNetwork;

// Opaque estimation result.
typedef struct TfReport TfReport;

// Estimation options; start from [`tf_options_default`].
typedef struct TfOptions {
  // Rounds `T` for the iterative methods.
  size_t iterations;
  // Zero-based local site.
  size_t local_site;
  enum TfWeights weights;
  // Confidence level used in the JSON report.
  double level;
} TfOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *tf_last_error(void);

// Library version as a static nul-terminated string.
const char *tf_version(void);

struct TfOptions tf_options_default(void);

// Loads the sites listed in a JSON manifest.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum TfStatus tf_network_from_manifest(const char *path, struct TfNetwork **out);

// Builds a network from site-major arrays. Site `j` owns `sizes[j]`
// consecutive rows; `x` holds `p` values per row and `z` holds `q`
// (include a column of ones for an intercept).
//
// # Safety
// `sizes` must point to `k` values; `y`, `x` and `z` to `N`, `N * p` and
// `N * q` values where `N` is the sum of `sizes`; `out` must be valid.
enum TfStatus tf_network_new(enum TfFamily family,
                             size_t p,
                             size_t q,
                             size_t k,
                             const size_t *sizes,
                             const double *y,
                             const double *x,
                             const double *z,
                             struct TfNetwork **out);

// # Safety
// `net` must come from a `tf_network_*` constructor, or be null.
void tf_network_free(struct TfNetwork *net);

// Number of sites, 0 for a null handle.
//
// # Safety
// `net` must be a live handle or null.
size_t tf_network_sites(const struct TfNetwork *net);

// Runs `method` (`m1`, `m2`, `m3`, `modified`, `onestep`, `average`,
// `homo` or `pooled`). `opts` may be null for the defaults.
//
// # Safety
// `net` must be a live handle, `method` a nul-terminated string, `opts`
// valid or null, and `out` a valid pointer.
enum TfStatus tf_estimate(const struct TfNetwork *net,
                          const char *method,
                          const struct TfOptions *opts,
                          struct TfReport **out);

// # Safety
// `report` must come from [`tf_estimate`], or be null.
void tf_report_free(struct TfReport *report);

// Length `p` of the estimate, 0 for a null handle.
//
// # Safety
// `report` must be a live handle or null.
size_t tf_report_dim(const struct TfReport *report);

// Copies the estimate into `buf`, which must hold `tf_report_dim` values.
//
// # Safety
// `report` must be a live handle and `buf` must point to `len` values.
enum TfStatus tf_report_estimate(const struct TfReport *report, double *buf, size_t len);

// Copies the row-major `p x p` covariance into `buf`.
//
// # Safety
// `report` must be a live handle and `buf` must point to `len` values.
enum TfStatus tf_report_covariance(const struct TfReport *report, double *buf, size_t len);

// Real numbers moved between nodes, 0 for a null handle.
//
// # Safety
// `report` must be a live handle or null.
size_t tf_report_communication(const struct TfReport *report);

// The report as JSON, the same document `tiltfed estimate` writes.
// Release the string with [`tf_string_free`].
//
// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum TfStatus tf_report_json(const struct TfReport *report, char **out);

// # Safety
// `s` must come from [`tf_report_json`], or be null.
void tf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TILTFED_H */
