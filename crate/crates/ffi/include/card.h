#ifndef CARD_H
#define CARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CardAnchor {
  CARD_ANCHOR_CHAIN = 0,
  CARD_ANCHOR_STAR = 1,
  CARD_ANCHOR_FULLY_CONNECTED = 2,
} CardAnchor;

typedef enum CardStatus {
  CARD_STATUS_OK = 0,
  CARD_STATUS_IO = 1,
  CARD_STATUS_PARSE = 2,
  CARD_STATUS_VALIDATION = 3,
  CARD_STATUS_NUMERIC = 4,
  CARD_STATUS_NULL_POINTER = 5,
  CARD_STATUS_UTF8 = 6,
  CARD_STATUS_BUFFER_TOO_SMALL = 7,
  CARD_STATUS_PANIC = 8,
} CardStatus;

typedef struct CardManifest CardManifest;

typedef struct CardParams CardParams;

typedef struct CardTopology CardTopology;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the
 * library; valid until the next failing call.
 */
const char *card_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void card_string_free(char *s);

/**
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum CardStatus card_manifest_parse(const char *text, struct CardManifest **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CardStatus card_manifest_load(const char *path, struct CardManifest **out);

/**
 * Number of agents, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live manifest handle.
 */
size_t card_manifest_agent_count(const struct CardManifest *m);

/**
 * # Safety
 * `m` must be null or a handle from this library, not yet freed.
 */
void card_manifest_free(struct CardManifest *m);

/**
 * Fresh parameters with the default dimensions.
 *
 * # Safety
 * `out` must be writable.
 */
enum CardStatus card_params_init(uint64_t seed, struct CardParams **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CardStatus card_params_load(const char *path, struct CardParams **out);

/**
 * # Safety
 * `p` must be a live params handle; `path` a NUL-terminated string.
 */
enum CardStatus card_params_save(const struct CardParams *p, const char *path);

/**
 * Hex SHA-256 of the checkpoint text; free with `card_string_free`.
 *
 * # Safety
 * `p` must be a live params handle; `out` must be writable.
 */
enum CardStatus card_params_digest(const struct CardParams *p, char **out);

/**
 * # Safety
 * `p` must be null or a handle from this library, not yet freed.
 */
void card_params_free(struct CardParams *p);

/**
 * Runs the generator. Writes the row-major n×n edge-probability matrix
 * into `matrix` (capacity `matrix_len`, at least n²) and the thresholded
 * topology into `out_topology`.
 *
 * # Safety
 * Handles must be live; `query` NUL-terminated; `matrix` valid for
 * `matrix_len` writes; `out_topology` writable.
 */
enum CardStatus card_generate(const struct CardParams *params,
                              const struct CardManifest *manifest,
                              const char *query,
                              enum CardAnchor anchor,
                              double tau,
                              double *matrix,
                              size_t matrix_len,
                              struct CardTopology **out_topology);

/**
 * # Safety
 * `t` must be null or a live topology handle.
 */
size_t card_topology_agent_count(const struct CardTopology *t);

/**
 * # Safety
 * `t` must be null or a live topology handle.
 */
size_t card_topology_edge_count(const struct CardTopology *t);

/**
 * Edges are sorted by (from, to).
 *
 * # Safety
 * `t` must be a live topology handle; out-pointers must be writable.
 */
enum CardStatus card_topology_edge(const struct CardTopology *t,
                                   size_t index,
                                   size_t *from,
                                   size_t *to,
                                   double *p);

/**
 * Copies the execution order (n agent indices) into `order`.
 *
 * # Safety
 * `t` must be a live topology handle; `order` valid for `len` writes.
 */
enum CardStatus card_topology_schedule(const struct CardTopology *t, size_t *order, size_t len);

/**
 * # Safety
 * `t` must be null or a handle from this library, not yet freed.
 */
void card_topology_free(struct CardTopology *t);

/**
 * Parses a matrix in table or plain layout into `out` (row-major, capacity
 * `len`) and stores its size in `n`. The diagonal is written as 0.
 *
 * # Safety
 * `text` NUL-terminated; `out` valid for `len` writes; `n` writable.
 */
enum CardStatus card_matrix_parse(const char *text, double *out, size_t len, size_t *n);

/**
 * Pearson r and two-sided p over the off-diagonal entries of two row-major
 * n×n matrices.
 *
 * # Safety
 * `a` and `b` valid for n² reads; `r` and `p` writable.
 */
enum CardStatus card_pearson(const double *a, const double *b, size_t n, double *r, double *p);

/**
 * Library version, static storage.
 */
const char *card_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARD_H */
