#ifndef FSKWS_H
#define FSKWS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FSKWS_API __declspec(dllexport)
#else
#define FSKWS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fskws_status {
    FSKWS_OK = 0,
    FSKWS_ERR_INVALID_ARGUMENT = 1,
    FSKWS_ERR_CONFIG = 2,
    FSKWS_ERR_FORMAT = 3,
    FSKWS_ERR_IO = 4,
    FSKWS_ERR_SAMPLING = 5,
    FSKWS_ERR_SHAPE = 6,
    FSKWS_ERR_NUMERIC = 7,
    FSKWS_ERR_STATE = 8,
    FSKWS_ERR_INTERNAL = 9
} fskws_status;

typedef struct fskws_dataset fskws_dataset;
typedef struct fskws_split fskws_split;
typedef struct fskws_suite fskws_suite;
typedef struct fskws_learner fskws_learner;
typedef struct fskws_report fskws_report;

typedef void (*fskws_epoch_callback)(size_t epoch, double loss, void* user);

FSKWS_API const char* fskws_version(void);
/* Short name of a status code, e.g. "config". */
FSKWS_API const char* fskws_status_name(fskws_status status);
/* Message of the last failed call on this thread; empty after a success. */
FSKWS_API const char* fskws_last_error(void);
/* Frees strings returned through char** out-parameters. */
FSKWS_API void fskws_string_free(char* s);

/* Datasets. `config_json` may be NULL or "{}" for the defaults. */
FSKWS_API fskws_status fskws_dataset_generate(const char* config_json, fskws_dataset** out);
FSKWS_API fskws_status fskws_dataset_load(const char* path, fskws_dataset** out);
FSKWS_API fskws_status fskws_dataset_save(const fskws_dataset* dataset, const char* path);
/* frames is set to 1 for frame features, 0 for pooled ones; any output may be NULL. */
FSKWS_API fskws_status fskws_dataset_info(const fskws_dataset* dataset, size_t* utterances, size_t* layers,
                                          size_t* dim, int* frames);
FSKWS_API void fskws_dataset_free(fskws_dataset* dataset);

/* Keyword splits. */
FSKWS_API fskws_status fskws_split_build(const fskws_dataset* dataset, uint64_t seed, fskws_split** out);
FSKWS_API fskws_status fskws_split_load(const char* path, const fskws_dataset* dataset, fskws_split** out);
FSKWS_API fskws_status fskws_split_save(const fskws_split* split, const char* path);
FSKWS_API void fskws_split_free(fskws_split* split);

/* Fixed meta-test suites. */
FSKWS_API fskws_status fskws_suite_make(const fskws_split* split, size_t tasks, size_t ways, size_t shots,
                                        size_t queries, uint64_t seed, fskws_suite** out);
FSKWS_API fskws_status fskws_suite_load(const char* path, fskws_suite** out);
FSKWS_API fskws_status fskws_suite_save(const fskws_suite* suite, const char* path);
FSKWS_API fskws_status fskws_suite_info(const fskws_suite* suite, size_t* tasks, size_t* ways, size_t* shots,
                                        size_t* queries);
FSKWS_API fskws_status fskws_suite_fingerprint(const fskws_suite* suite, char** out);
FSKWS_API void fskws_suite_free(fskws_suite* suite);

/* Run configurations as JSON objects. Keys in `overrides_json` replace those of
   `base_json`; either may be NULL. The result is validated. */
FSKWS_API fskws_status fskws_config_merge(const char* base_json, const char* overrides_json, char** out);

/* Learners. */
FSKWS_API fskws_status fskws_learner_create(const char* config_json, const fskws_dataset* dataset,
                                            fskws_learner** out);
FSKWS_API fskws_status fskws_learner_train(fskws_learner* learner, const fskws_dataset* dataset,
                                           const fskws_split* split, fskws_epoch_callback on_epoch, void* user);
FSKWS_API fskws_status fskws_learner_save(const fskws_learner* learner, const char* path);
FSKWS_API fskws_status fskws_learner_load(const char* path, fskws_learner** out);
FSKWS_API fskws_status fskws_learner_config(const fskws_learner* learner, char** out);
FSKWS_API fskws_status fskws_learner_dump_embeddings(const fskws_learner* learner, const fskws_dataset* dataset,
                                                     const char* path);
FSKWS_API void fskws_learner_free(fskws_learner* learner);

/* Evaluation. `split` may be NULL unless resample_supports > 0. */
FSKWS_API fskws_status fskws_evaluate(const fskws_learner* learner, const fskws_dataset* dataset,
                                      const fskws_suite* suite, const fskws_split* split, size_t resample_supports,
                                      uint64_t resample_seed, size_t threads, fskws_report** out);
FSKWS_API fskws_status fskws_report_load(const char* path, fskws_report** out);
FSKWS_API fskws_status fskws_report_save(const fskws_report* report, const char* path);
FSKWS_API fskws_status fskws_report_summary(const fskws_report* report, size_t* tasks, double* mean, double* std);
FSKWS_API fskws_status fskws_report_accuracy(const fskws_report* report, size_t task, double* accuracy);
FSKWS_API fskws_status fskws_report_jsonl(const fskws_report* report, char** out);
/* Text table of several reports. */
FSKWS_API fskws_status fskws_report_table(const fskws_report* const* reports, size_t count, char** out);
FSKWS_API void fskws_report_free(fskws_report* report);

#ifdef __cplusplus
}
#endif

#endif
