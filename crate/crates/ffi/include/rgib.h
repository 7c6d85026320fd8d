#ifndef RGIB_H
#define RGIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `rgib_*` call.
 */
typedef enum RgibStatus {
  RGIB_STATUS_OK = 0,
  RGIB_STATUS_NULL_POINTER = 1,
  RGIB_STATUS_INVALID_ARGUMENT = 2,
  RGIB_STATUS_INVALID_CONFIG = 3,
  RGIB_STATUS_DATA = 4,
  RGIB_STATUS_NUMERIC = 5,
  RGIB_STATUS_BUFFER_TOO_SMALL = 6,
  RGIB_STATUS_PANIC = 7,
} RgibStatus;

/**
 * Training configuration.
 */
typedef struct RgibConfig RgibConfig;

/**
 * Attributed graph.
 */
typedef struct RgibGraph RgibGraph;

/**
 * Trained encoder with its configuration and training history.
 */
typedef struct RgibModel RgibModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *rgib_last_error_message(void);

/**
 * Loads a graph file, optionally row-normalising its features.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RgibStatus rgib_graph_load(const char *path, bool normalize, struct RgibGraph **out);

/**
 * Generates a stochastic block model graph with row-normalised features.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum RgibStatus rgib_graph_sbm(size_t n_per_block,
                               size_t blocks,
                               double p_in,
                               double p_out,
                               size_t feature_dim,
                               double feature_shift,
                               uint64_t seed,
                               struct RgibGraph **out);

/**
 * Number of nodes, or 0 for NULL.
 *
 * # Safety
 * `graph` must be NULL or a live handle.
 */
size_t rgib_graph_num_nodes(const struct RgibGraph *graph);

/**
 * Number of undirected edges, or 0 for NULL.
 *
 * # Safety
 * `graph` must be NULL or a live handle.
 */
size_t rgib_graph_num_edges(const struct RgibGraph *graph);

/**
 * # Safety
 * `graph` must be NULL or a handle not yet freed.
 */
void rgib_graph_free(struct RgibGraph *graph);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum RgibStatus rgib_config_default(struct RgibConfig **out);

/**
 * Parses a flat JSON configuration; missing keys take defaults, unknown keys
 * are rejected.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RgibStatus rgib_config_from_json(const char *json, struct RgibConfig **out);

/**
 * # Safety
 * `config` must be NULL or a handle not yet freed.
 */
void rgib_config_free(struct RgibConfig *config);

/**
 * Trains an encoder on `graph`.
 *
 * # Safety
 * `graph` and `config` must be live handles and `out` a writable pointer.
 */
enum RgibStatus rgib_train(const struct RgibGraph *graph,
                           const struct RgibConfig *config,
                           struct RgibModel **out);

/**
 * Embedding width, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t rgib_model_embed_dim(const struct RgibModel *model);

/**
 * Objective logged at the last training epoch.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum RgibStatus rgib_model_final_objective(const struct RgibModel *model, double *out);

/**
 * Writes the deterministic embeddings of `graph` row-major into `buf`, which
 * must hold `num_nodes · embed_dim` values.
 *
 * # Safety
 * `model` and `graph` must be live handles and `buf` must point to `len`
 * writable doubles.
 */
enum RgibStatus rgib_model_embed(const struct RgibModel *model,
                                 const struct RgibGraph *graph,
                                 double *buf,
                                 size_t len);

/**
 * Saves a JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum RgibStatus rgib_model_save(const struct RgibModel *model, const char *path);

/**
 * Loads a JSON checkpoint. The loaded model carries no training history.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RgibStatus rgib_model_load(const char *path, struct RgibModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void rgib_model_free(struct RgibModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGIB_H */
