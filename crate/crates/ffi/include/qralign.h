#ifndef QRALIGN_H
#define QRALIGN_H

#pragma once

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum QrStatus {
  QR_STATUS_OK = 0,
  QR_STATUS_NULL_ARGUMENT = 1,
  QR_STATUS_INVALID_UTF8 = 2,
  QR_STATUS_INVALID_ARGUMENT = 3,
  QR_STATUS_MISSING_ARTIFACT = 4,
  QR_STATUS_CORRUPT_ARTIFACT = 5,
  QR_STATUS_BUFFER_TOO_SMALL = 6,
  QR_STATUS_INTERNAL = 7,
} QrStatus;

// Opaque search engine over a generated catalog.
typedef struct QrEngine QrEngine;

// Opaque rewrite server bound to one checkpoint.
typedef struct QrServer QrServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. Valid until the next
// failing call on the same thread.
const char *qr_last_error(void);

// Generates the catalog for the given grammar sizes and builds an engine
// with default BM25 parameters.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum QrStatus qr_engine_new(size_t brands,
                            size_t categories,
                            size_t modifiers,
                            uint64_t seed,
                            size_t recall_depth,
                            struct QrEngine **out);

// # Safety
// `engine` must come from `qr_engine_new` and not be used afterwards.
void qr_engine_free(struct QrEngine *engine);

// Number of products in the engine's catalog.
//
// # Safety
// `engine` must be a live handle.
size_t qr_engine_len(const struct QrEngine *engine);

// Writes the ranked product ids retrieved for `query` into `ids`.
// `len` receives the full result count; `BufferTooSmall` is returned when
// it exceeds `capacity`, with the first `capacity` ids written.
//
// # Safety
// `ids` must point to `capacity` writable `uint32_t`; `len` to one `size_t`.
enum QrStatus qr_engine_retrieve(const struct QrEngine *engine,
                                 const char *query,
                                 uint32_t *ids,
                                 size_t capacity,
                                 size_t *len);

// Aggregate relevance of the top `top_m` products `rewrite` retrieves,
// judged against `query`.
//
// # Safety
// `engine` must be a live handle and `out` writable.
enum QrStatus qr_engine_relevance(const struct QrEngine *engine,
                                  const char *query,
                                  const char *rewrite,
                                  size_t top_m,
                                  double *out);

// Loads a checkpoint and opens a server whose cache entries live
// `ttl_secs` seconds. The cache starts empty.
//
// # Safety
// `checkpoint_path` must be a NUL-terminated path; `out` writable.
enum QrStatus qr_server_open(const char *checkpoint_path, uint64_t ttl_secs, struct QrServer **out);

// # Safety
// `server` must come from `qr_server_open` and not be used afterwards.
void qr_server_free(struct QrServer *server);

// Serves `query`: up to three rewrites joined by newlines, written to `out`
// as a string owned by the caller (release with `qr_string_free`).
// `cache_hit` may be NULL.
//
// # Safety
// `server` must be a live handle and `out` writable.
enum QrStatus qr_server_serve(const struct QrServer *server,
                              const char *query,
                              char **out,
                              bool *cache_hit);

// Number of model decodes the server has run.
//
// # Safety
// `server` must be a live handle or NULL.
size_t qr_server_decodes(const struct QrServer *server);

// # Safety
// `s` must come from this library and not be used afterwards.
void qr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QRALIGN_H */
