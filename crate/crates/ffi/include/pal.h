#ifndef PAL_H
#define PAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum PalStatus {
  PAL_STATUS_OK = 0,
  // A required pointer argument was null.
  PAL_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  PAL_STATUS_INVALID_UTF8 = 2,
  // An argument was rejected (empty text, bad modality, bad stage).
  PAL_STATUS_INVALID_INPUT = 3,
  // Unknown persona, user or session.
  PAL_STATUS_NOT_FOUND = 4,
  // The session is finished, busy, or it is not the clinician's turn.
  PAL_STATUS_CONFLICT = 5,
  // A chat, speech or synthesis provider failed.
  PAL_STATUS_PROVIDER = 6,
  // Model output or an input document could not be parsed.
  PAL_STATUS_PARSE = 7,
  // Reading or writing files failed, or the configuration is unusable.
  PAL_STATUS_IO = 8,
  // A bug inside the library. The handle should not be used again.
  PAL_STATUS_PANIC = 9,
} PalStatus;

// An engine with its own runtime, persona library and file store.
typedef struct PalEngine PalEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *pal_last_error(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer obtained from this library that has not
// been freed.
void pal_string_free(char *s);

// Library version, a static string.
const char *pal_version(void);

// Parse asterisk cue markup. Writes `{"text": ..., "cues": [{"position", "action"}]}`.
//
// # Safety
// `raw` must be a valid C string; `out` must be writable.
enum PalStatus pal_parse_cues(const char *raw, char **out);

// The speakable text of a reply, with cues removed.
//
// # Safety
// `raw` must be a valid C string; `out` must be writable.
enum PalStatus pal_strip_cues(const char *raw, char **out);

// The feedback system prompt sent to the model.
//
// # Safety
// `out` must be writable.
enum PalStatus pal_feedback_prompt(char **out);

// Parse a feedback response. Writes `{"items": [...], "issues": [...]}`,
// or fails with `Parse` when no item is complete.
//
// # Safety
// `raw` must be a valid C string; `out` must be writable.
enum PalStatus pal_parse_feedback(const char *raw, char **out);

// Parse a feedback response and check its quotes against a transcript in
// `Doctor:` / `Patient:` line format. Writes
// `{"items": [...], "issues": [...], "grounding": {"verdicts": [...]}}`.
//
// # Safety
// `feedback_text` and `transcript` must be valid C strings; `out` must be
// writable.
enum PalStatus pal_ground_quotes(const char *feedback_text, const char *transcript, char **out);

// Open an engine over a persona directory and a data directory. When
// `config_path` is null the defaults (mock provider) are used, with
// `PAL_*` environment overrides applied either way.
//
// # Safety
// `personas_dir` and `data_dir` must be valid C strings, `config_path`
// null or a valid C string, and `out` writable. Release the handle with
// [`pal_engine_free`].
enum PalStatus pal_engine_open(const char *personas_dir,
                               const char *data_dir,
                               const char *config_path,
                               struct PalEngine **out);

// Release an engine. Null is ignored.
//
// # Safety
// `engine` must be null or a handle from [`pal_engine_open`] that has not
// been freed, and no other call may be using it.
void pal_engine_free(struct PalEngine *engine);

// Loaded personas as a JSON array of summaries.
//
// # Safety
// `engine` must be a live handle; `out` must be writable.
enum PalStatus pal_engine_list_personas(const struct PalEngine *engine, char **out);

// Create a user. Writes the new user id.
//
// # Safety
// `engine` must be a live handle; `out` must be writable.
enum PalStatus pal_engine_create_user(const struct PalEngine *engine, char **out);

// Start a session. `modality` is `"text"` or `"voice"`. Writes the session id.
//
// # Safety
// `engine` must be a live handle, the strings valid C strings, and `out`
// writable.
enum PalStatus pal_engine_start_session(const struct PalEngine *engine,
                                        const char *user_id,
                                        const char *persona_id,
                                        const char *modality,
                                        char **out);

// Send a clinician message to a text session and wait for the whole
// patient reply. Writes the reply summary as JSON
// (`session_id`, `clinician_index`, `patient_index`, `turn_count`, `text`,
// `cues`, `usage`).
//
// # Safety
// `engine` must be a live handle, the strings valid C strings, and `out`
// writable.
enum PalStatus pal_engine_send_text(const struct PalEngine *engine,
                                    const char *session_id,
                                    const char *text,
                                    char **out);

// Generate feedback and finish the session. Writes the feedback report as
// JSON. Finishing again returns the stored report.
//
// # Safety
// `engine` must be a live handle, `session_id` a valid C string, and `out`
// writable.
enum PalStatus pal_engine_finish(const struct PalEngine *engine,
                                 const char *session_id,
                                 char **out);

// The session as JSON, in the same shape as the HTTP session detail.
//
// # Safety
// `engine` must be a live handle, `session_id` a valid C string, and `out`
// writable.
enum PalStatus pal_engine_get_session(const struct PalEngine *engine,
                                      const char *session_id,
                                      char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAL_H */
