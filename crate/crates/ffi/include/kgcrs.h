#ifndef KGCRS_H
#define KGCRS_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KgcrsStatus {
  KGCRS_STATUS_OK = 0,
  KGCRS_STATUS_NULL_ARGUMENT = 1,
  KGCRS_STATUS_INVALID_UTF8 = 2,
  KGCRS_STATUS_IO = 3,
  KGCRS_STATUS_PARSE = 4,
  KGCRS_STATUS_CHECKPOINT = 5,
  KGCRS_STATUS_INVALID_MESSAGE = 6,
  KGCRS_STATUS_INTERNAL = 7,
  KGCRS_STATUS_PANIC = 8,
} KgcrsStatus;

typedef struct KgcrsEngine KgcrsEngine;

typedef struct KgcrsSession KgcrsSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint directory against the knowledge graph file it was trained on.
 *
 * # Safety
 * `checkpoint_dir` and `kg_path` must be NUL-terminated strings; `out` must be writable.
 */
enum KgcrsStatus kgcrs_engine_open(const char *checkpoint_dir,
                                   const char *kg_path,
                                   struct KgcrsEngine **out);

/**
 * Sets how many recommendations each reply carries.
 *
 * # Safety
 * `engine` must come from [`kgcrs_engine_open`] and have no live sessions.
 */
enum KgcrsStatus kgcrs_engine_set_recommendations(struct KgcrsEngine *engine, size_t count);

/**
 * # Safety
 * `engine` must come from [`kgcrs_engine_open`] or be NULL. Sessions keep
 * the model alive independently.
 */
void kgcrs_engine_free(struct KgcrsEngine *engine);

/**
 * # Safety
 * `engine` must be a live engine handle; `out` must be writable.
 */
enum KgcrsStatus kgcrs_session_new(const struct KgcrsEngine *engine, struct KgcrsSession **out);

/**
 * Sends one user message. `out_json` receives
 * `{response_text, recommendations, subgraph}`.
 *
 * # Safety
 * `session` must be a live session handle not used concurrently; `message`
 * NUL-terminated; `out_json` writable.
 */
enum KgcrsStatus kgcrs_session_send(struct KgcrsSession *session,
                                    const char *message,
                                    char **out_json);

/**
 * Writes the whole session (history, entities, last subgraph and
 * recommendations) as JSON.
 *
 * # Safety
 * `session` must be a live session handle; `out_json` writable.
 */
enum KgcrsStatus kgcrs_session_json(const struct KgcrsSession *session, char **out_json);

/**
 * # Safety
 * `session` must come from [`kgcrs_session_new`] or be NULL.
 */
void kgcrs_session_free(struct KgcrsSession *session);

/**
 * # Safety
 * `s` must be a string returned by this library or NULL.
 */
void kgcrs_string_free(char *s);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *kgcrs_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *kgcrs_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGCRS_H */
