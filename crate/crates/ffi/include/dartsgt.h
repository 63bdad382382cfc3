#ifndef DARTSGT_H
#define DARTSGT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DgStatus {
  DG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DG_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad input: configuration, file contents, shapes or indices.
   */
  DG_STATUS_INVALID = 2,
  /**
   * A file could not be read or written.
   */
  DG_STATUS_IO = 3,
  /**
   * A computation failed, e.g. a non-finite loss.
   */
  DG_STATUS_RUNTIME = 4,
  /**
   * The library panicked; the handles involved should be considered unusable.
   */
  DG_STATUS_PANIC = 5,
} DgStatus;

/**
 * Opaque dataset handle.
 */
typedef struct DgDataset DgDataset;

/**
 * Opaque model handle.
 */
typedef struct DgModel DgModel;

/**
 * Opaque interpretability report handle.
 */
typedef struct DgReport DgReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *dg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dg_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library and not yet freed.
 */
void dg_string_free(char *s);

/**
 * Generates a synthetic dataset (`motif`, `degree-reg` or `community`).
 *
 * # Safety
 * `task` must be a NUL-terminated string; `out` must be writable.
 */
enum DgStatus dg_dataset_generate(const char *task,
                                  size_t n_graphs,
                                  uint64_t seed,
                                  struct DgDataset **out);

/**
 * Loads a JSON Lines dataset.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DgStatus dg_dataset_load(const char *path, struct DgDataset **out);

/**
 * Writes a dataset as JSON Lines.
 *
 * # Safety
 * `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum DgStatus dg_dataset_save(const struct DgDataset *ds, const char *path);

/**
 * Number of graphs, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t dg_dataset_len(const struct DgDataset *ds);

/**
 * # Safety
 * `ds` must be null or a dataset handle not yet freed.
 */
void dg_dataset_free(struct DgDataset *ds);

/**
 * Searches an architecture on `ds` and trains the discrete model on all of it.
 *
 * `config_json` is a JSON search configuration; null selects the defaults
 * for the dataset with the given seed.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_json` null or NUL-terminated,
 * and `out` writable.
 */
enum DgStatus dg_search_and_train(const struct DgDataset *ds,
                                  const char *config_json,
                                  uint64_t seed,
                                  struct DgModel **out);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DgStatus dg_model_load(const char *path, struct DgModel **out);

/**
 * Writes a model checkpoint.
 *
 * # Safety
 * `model` must be a live model handle; `path` a NUL-terminated string.
 */
enum DgStatus dg_model_save(const struct DgModel *model, const char *path);

/**
 * Number of GNN operator bundles held by the model.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t dg_model_gnn_bundles(const struct DgModel *model);

/**
 * Mean loss and task metric (accuracy or MAE) over `ds`.
 *
 * # Safety
 * Handles must be live; `loss` and `metric` writable.
 */
enum DgStatus dg_model_evaluate(const struct DgModel *model,
                                const struct DgDataset *ds,
                                double *loss,
                                double *metric);

/**
 * # Safety
 * `model` must be null or a model handle not yet freed.
 */
void dg_model_free(struct DgModel *model);

/**
 * Runs the head-ablation analysis over every instance of `ds`.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum DgStatus dg_interpret(const struct DgModel *model,
                           const struct DgDataset *ds,
                           size_t k,
                           double node_fraction,
                           bool sign_agnostic,
                           struct DgReport **out);

/**
 * Number of instance reports.
 *
 * # Safety
 * `report` must be null or a live report handle.
 */
size_t dg_report_len(const struct DgReport *report);

/**
 * Total forward passes spent by the analysis.
 *
 * # Safety
 * `report` must be null or a live report handle.
 */
size_t dg_report_forward_passes(const struct DgReport *report);

/**
 * Median specialization over instances.
 *
 * # Safety
 * `report` must be a live report handle; `out` writable.
 */
enum DgStatus dg_report_median_specialization(const struct DgReport *report, double *out);

/**
 * Median focus over instances where focus is defined. `*defined` is false
 * (and `*out` NaN) when no instance has a defined focus.
 *
 * # Safety
 * `report` must be a live report handle; `out` and `defined` writable.
 */
enum DgStatus dg_report_median_focus(const struct DgReport *report, double *out, bool *defined);

/**
 * JSON record of one instance; release it with [`dg_string_free`].
 *
 * # Safety
 * `report` must be a live report handle; `out` writable.
 */
enum DgStatus dg_report_instance_json(const struct DgReport *report, size_t index, char **out);

/**
 * Writes `instances.jsonl` and `dataset.json` into `dir`.
 *
 * # Safety
 * `report` must be a live report handle; `dir` a NUL-terminated string.
 */
enum DgStatus dg_report_write(const struct DgReport *report, const char *dir);

/**
 * # Safety
 * `report` must be null or a report handle not yet freed.
 */
void dg_report_free(struct DgReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DARTSGT_H */
