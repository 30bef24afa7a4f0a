#ifndef DLRM_H
#define DLRM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DlrmStatus {
  DLRM_STATUS_OK = 0,
  DLRM_STATUS_NULL_POINTER = 1,
  DLRM_STATUS_INVALID_ARGUMENT = 2,
  DLRM_STATUS_SHAPE = 3,
  DLRM_STATUS_INDEX_OUT_OF_RANGE = 4,
  DLRM_STATUS_CONFIG = 5,
  DLRM_STATUS_INFEASIBLE = 6,
  DLRM_STATUS_COMM = 7,
  DLRM_STATUS_IO = 8,
  DLRM_STATUS_PANIC = 9,
  DLRM_STATUS_INTERNAL = 10,
} DlrmStatus;

typedef enum DlrmUpdateStrategy {
  DLRM_UPDATE_STRATEGY_ATOMIC = 0,
  DLRM_UPDATE_STRATEGY_LOCKED = 1,
  DLRM_UPDATE_STRATEGY_RACE_FREE = 2,
} DlrmUpdateStrategy;

typedef enum DlrmPrecision {
  DLRM_PRECISION_FP32 = 0,
  DLRM_PRECISION_SPLIT_BF16 = 1,
} DlrmPrecision;

// A single-process model trained on synthetic data.
typedef struct DlrmModel DlrmModel;

// An embedding table owned by the library.
typedef struct DlrmTable DlrmTable;

// Predicted communication for one configuration and rank count.
typedef struct DlrmCommPlan {
  size_t ranks;
  size_t global_batch;
  uint64_t allreduce_elements;
  double allreduce_bytes_per_rank;
  uint64_t alltoall_total_bytes;
  double alltoall_bytes_per_rank;
  double alltoall_msg_bytes;
  // Bytes of table storage across all ranks.
  double table_bytes;
  // 1 when allreduce traffic dominates at this rank count.
  int32_t allreduce_bound;
} DlrmCommPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next library call on the same thread.
const char *dlrm_last_error(void);

// Library version as a static string.
const char *dlrm_version(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void dlrm_string_free(char *s);

// Creates a `rows x dim` table from row-major `weights` (`rows * dim`
// values, copied).
//
// # Safety
// `weights` must point to `rows * dim` floats and `out` must be writable.
enum DlrmStatus dlrm_table_new(size_t rows,
                               size_t dim,
                               const float *weights,
                               struct DlrmTable **out);

// # Safety
// `table` must come from [`dlrm_table_new`] and not be used afterwards.
void dlrm_table_free(struct DlrmTable *table);

// Copies the table into `out`, which holds `len` floats.
//
// # Safety
// `table` must be live and `out` must hold `len` floats.
enum DlrmStatus dlrm_table_weights(const struct DlrmTable *table, float *out, size_t len);

// Sums the rows of each bag. Bag `b` covers `indices[offsets[b]..offsets[b+1]]`;
// `offsets` has `batch + 1` entries and `out` holds `batch * dim` floats.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum DlrmStatus dlrm_table_forward(const struct DlrmTable *table,
                                   const size_t *offsets,
                                   size_t batch,
                                   const size_t *indices,
                                   size_t nnz,
                                   float *out);

// Backward and SGD step in one call: every lookup's row receives
// `-lr * dy[bag]`. `dy` holds `batch * dim` floats.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum DlrmStatus dlrm_table_sgd(struct DlrmTable *table,
                               const size_t *offsets,
                               size_t batch,
                               const size_t *indices,
                               size_t nnz,
                               const float *dy,
                               float lr,
                               enum DlrmUpdateStrategy strategy,
                               size_t threads);

// Splits `len` floats into their upper (bf16) and lower 16-bit halves.
//
// # Safety
// `src`, `hi` and `lo` must each hold `len` elements.
enum DlrmStatus dlrm_bf16_split(const float *src, size_t len, uint16_t *hi, uint16_t *lo);

// Inverse of [`dlrm_bf16_split`]; exact for every bit pattern.
//
// # Safety
// `hi`, `lo` and `out` must each hold `len` elements.
enum DlrmStatus dlrm_bf16_merge(const uint16_t *hi, const uint16_t *lo, size_t len, float *out);

// Communication predicted for preset `config` at `ranks` ranks. `weak`
// selects weak scaling (fixed per-rank batch).
//
// # Safety
// `config` must be a NUL-terminated string and `out` writable.
enum DlrmStatus dlrm_costmodel_plan(const char *config,
                                    size_t ranks,
                                    bool weak,
                                    struct DlrmCommPlan *out);

// Builds a single-process model for preset `config` with its own synthetic
// data stream.
//
// # Safety
// `config` must be a NUL-terminated string and `out` writable.
enum DlrmStatus dlrm_model_new(const char *config,
                               uint64_t seed,
                               float lr,
                               enum DlrmPrecision precision,
                               struct DlrmModel **out);

// # Safety
// `model` must come from [`dlrm_model_new`] and not be used afterwards.
void dlrm_model_free(struct DlrmModel *model);

// Trains `steps` iterations on fresh synthetic batches, writing each loss
// to `losses` when it is not null.
//
// # Safety
// `model` must be live; `losses` is null or holds `steps` floats.
enum DlrmStatus dlrm_model_train(struct DlrmModel *model, size_t steps, float *losses);

// Hash of the model's dense parameters; equal models give equal values.
//
// # Safety
// `model` must be live and `out` writable.
enum DlrmStatus dlrm_model_checksum(const struct DlrmModel *model, uint64_t *out);

// Runs an in-process benchmark described by the JSON `spec` (fields of the
// CLI run options; missing fields take defaults) and stores the JSON report
// in `*report`, to be released with [`dlrm_string_free`].
//
// # Safety
// `spec` must be a NUL-terminated string and `report` writable.
enum DlrmStatus dlrm_run_benchmark(const char *spec, char **report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLRM_H */
