#ifndef CJMIX_H
#define CJMIX_H

#include <stddef.h>
#include <stdint.h>

#if defined(CJMIX_BUILDING_LIBRARY)
#define CJMIX_API __attribute__((visibility("default")))
#else
#define CJMIX_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum cjmix_status {
  CJMIX_OK = 0,
  CJMIX_ERR_FAILURE = 1,        /* numerical or unexpected failure */
  CJMIX_ERR_INPUT = 2,          /* bad data, configuration or arguments */
  CJMIX_ERR_NOT_CONVERGED = 3,  /* only reported in strict mode */
  CJMIX_ERR_IMPROPER_PRIOR = 4
} cjmix_status;

typedef enum cjmix_command {
  CJMIX_CMD_FIT = 0,
  CJMIX_CMD_TUNE = 1,
  CJMIX_CMD_EFFECTS = 2,
  CJMIX_CMD_SIMULATE = 3,
  CJMIX_CMD_VALIDATE = 4
} cjmix_command;

/* A configured run: config plus data paths, output directory and overrides. */
typedef struct cjmix_session cjmix_session;

CJMIX_API const char* cjmix_version(void);

/* Message of the last failed call on this thread; empty when none. */
CJMIX_API const char* cjmix_last_error(void);

CJMIX_API cjmix_status cjmix_session_open(const char* config_path, cjmix_session** out);
CJMIX_API cjmix_status cjmix_session_open_json(const char* config_json, cjmix_session** out);
CJMIX_API void cjmix_session_close(cjmix_session* session);

/* Pass NULL for moderators to fit the intercept-only membership model. */
CJMIX_API cjmix_status cjmix_session_set_data(cjmix_session* session, const char* profiles_csv,
                                              const char* moderators_csv);
CJMIX_API cjmix_status cjmix_session_set_output(cjmix_session* session, const char* directory);
CJMIX_API cjmix_status cjmix_session_set_seed(cjmix_session* session, uint64_t seed);
CJMIX_API cjmix_status cjmix_session_set_threads(cjmix_session* session, int threads);
CJMIX_API cjmix_status cjmix_session_set_strict(cjmix_session* session, int strict);

CJMIX_API cjmix_status cjmix_session_run(cjmix_session* session, cjmix_command command);

/* Notes from the last run (dropped respondents, warnings, summaries). */
CJMIX_API size_t cjmix_session_message_count(const cjmix_session* session);
CJMIX_API const char* cjmix_session_message(const cjmix_session* session, size_t index);

/* Files written by the last run, relative to the output directory. */
CJMIX_API size_t cjmix_session_output_count(const cjmix_session* session);
CJMIX_API const char* cjmix_session_output(const cjmix_session* session, size_t index);

#ifdef __cplusplus
}
#endif

#endif
