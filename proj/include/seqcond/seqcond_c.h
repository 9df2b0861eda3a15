#ifndef SEQCOND_C_H
#define SEQCOND_C_H

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__)
#define SEQCOND_API __attribute__((visibility("default")))
#else
#define SEQCOND_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values double as CLI exit codes. */
typedef enum seqcond_status {
    SEQCOND_OK = 0,
    SEQCOND_CHECK_FAILED = 1,
    SEQCOND_INPUT_ERROR = 2,
    SEQCOND_NUMERICAL_ABORT = 3,
    SEQCOND_IO_ERROR = 4,
    SEQCOND_INTERNAL_ERROR = 5
} seqcond_status;

typedef struct seqcond_run seqcond_run;
typedef struct seqcond_model seqcond_model;

SEQCOND_API const char* seqcond_version(void);
SEQCOND_API const char* seqcond_status_name(seqcond_status status);

/* Message of the last failing call on this thread, "" if none. */
SEQCOND_API const char* seqcond_last_error(void);

/* command: oracle | verify | train | rl | bench. config_json is the run
   configuration text; it is parsed and validated by seqcond_run_execute. */
SEQCOND_API seqcond_status seqcond_run_create(const char* command, const char* config_json, seqcond_run** out);

/* Command-line style overrides: seed, precision, report_dir, checkpoint_dir,
   threads, stage, instances, force. */
SEQCOND_API seqcond_status seqcond_run_set(seqcond_run* run, const char* key, const char* value);

SEQCOND_API seqcond_status seqcond_run_execute(seqcond_run* run);

/* JSON report of the last execute; owned by the handle. */
SEQCOND_API const char* seqcond_run_report(const seqcond_run* run);

SEQCOND_API void seqcond_run_destroy(seqcond_run* run);

/* Loads a checkpoint. When config_json is non-NULL the model it describes
   (the default model if it has no "model" object) must hash to the
   checkpoint's config hash unless force is non-zero. */
SEQCOND_API seqcond_status seqcond_model_load(const char* path, const char* config_json, int force, seqcond_model** out);

SEQCOND_API size_t seqcond_model_vocab_size(const seqcond_model* model);
SEQCOND_API size_t seqcond_model_parameter_count(const seqcond_model* model);

/* Next-token logits for every position: out holds n * vocab_size values. */
SEQCOND_API seqcond_status seqcond_model_logits(seqcond_model* model, const int32_t* ids, size_t n, double* out, size_t out_len);

SEQCOND_API void seqcond_model_destroy(seqcond_model* model);

#ifdef __cplusplus
}
#endif

#endif
