#ifndef MINIBERT_MINIBERT_H_
#define MINIBERT_MINIBERT_H_

/*
 * C interface to the minibert toolkit.
 *
 * Objects are opaque handles created by mb_*_create/load/build functions and
 * released with the matching mb_*_free (which accepts NULL). Every fallible
 * call returns an mb_status; on failure mb_last_error() holds a message for
 * the calling thread until its next failing call.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(MINIBERT_BUILDING)
#define MINIBERT_API __declspec(dllexport)
#else
#define MINIBERT_API __declspec(dllimport)
#endif
#else
#define MINIBERT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mb_status {
  MB_OK = 0,
  MB_ERR_INVALID_ARGUMENT = 1,
  MB_ERR_DIMENSION = 2,
  MB_ERR_CONTRACT = 3,
  MB_ERR_PARSE = 4,
  MB_ERR_IO = 5,
  MB_ERR_UNDEFINED_METRIC = 6,
  MB_ERR_MISMATCH = 7,
  MB_ERR_OUT_OF_MEMORY = 8,
  MB_ERR_INTERNAL = 9
} mb_status;

MINIBERT_API const char* mb_version(void);
MINIBERT_API const char* mb_status_name(mb_status status);
/* Message of the calling thread's most recent failure ("" if none). */
MINIBERT_API const char* mb_last_error(void);

/* ---- runtime ---- */

MINIBERT_API void mb_set_threads(int n);
MINIBERT_API int mb_get_threads(void);
/* Non-zero pins every internal loop to one thread. */
MINIBERT_API void mb_set_deterministic(int on);

enum { MB_LOG_INFO = 0, MB_LOG_WARNING = 1 };
typedef void (*mb_log_fn)(int level, const char* message, void* user);
/* NULL restores the default sink (standard error). */
MINIBERT_API void mb_set_log_callback(mb_log_fn fn, void* user);

/* ---- vocabulary ---- */

typedef struct mb_vocab mb_vocab;

/* Corpus file: one sentence per non-blank line. */
MINIBERT_API mb_status mb_vocab_build(const char* corpus_path, size_t target_size, mb_vocab** out);
MINIBERT_API mb_status mb_vocab_load(const char* path, mb_vocab** out);
MINIBERT_API mb_status mb_vocab_save(const mb_vocab* vocab, const char* path);
MINIBERT_API size_t mb_vocab_size(const mb_vocab* vocab);
MINIBERT_API void mb_vocab_free(mb_vocab* vocab);

/* ---- model ---- */

typedef struct mb_model_config {
  size_t vocab_size;
  size_t hidden_dim;
  size_t num_layers;
  size_t num_heads;
  size_t ff_dim;
  size_t max_len;
  float dropout;
  int tie_mlm_weights;
  int rtd_head;
} mb_model_config;

MINIBERT_API void mb_model_config_default(mb_model_config* config);

typedef struct mb_model mb_model;

MINIBERT_API mb_status mb_model_create(const mb_model_config* config, uint64_t seed, mb_model** out);
/* With a non-NULL `expected`, a differing stored config fails with
   MB_ERR_MISMATCH and a message naming both. */
MINIBERT_API mb_status mb_model_load(const char* path, const mb_model_config* expected, mb_model** out);
MINIBERT_API mb_status mb_model_save(const mb_model* model, const char* path);
MINIBERT_API mb_status mb_model_get_config(const mb_model* model, mb_model_config* out);
MINIBERT_API void mb_model_free(mb_model* model);

/* ---- pretraining ---- */

typedef struct mb_pretrain_options {
  uint64_t seed;
  size_t steps;
  size_t batch_size;
  double lr;
  size_t max_len;
  const char* mask_policy; /* "token", "wwm", "span" or "electra" */
  double select_rate;
  double geo_p;
  int max_span;
  size_t checkpoint_every;        /* 0 disables periodic checkpoints */
  const char* checkpoint_prefix;  /* files are <prefix><step>.bin */
} mb_pretrain_options;

MINIBERT_API void mb_pretrain_options_default(mb_pretrain_options* options);

typedef void (*mb_pretrain_step_fn)(size_t step, double total, double mlm, double nsp, double rtd,
                                    void* user);

/* Trains `model` in place. A non-NULL loss_log_path receives the per-step
   loss table. */
MINIBERT_API mb_status mb_pretrain(mb_model* model, const char* corpus_path, const mb_vocab* vocab,
                                   const mb_pretrain_options* options, const char* loss_log_path,
                                   mb_pretrain_step_fn on_step, void* user);

/* ---- labeled data ---- */

typedef struct mb_dataset mb_dataset;

MINIBERT_API mb_status mb_dataset_load_tsv(const char* path, mb_dataset** out);
MINIBERT_API mb_status mb_dataset_save_tsv(const mb_dataset* dataset, const char* path);
MINIBERT_API size_t mb_dataset_size(const mb_dataset* dataset);
/* Copies the labels into out[0..n); n must equal the dataset size. */
MINIBERT_API mb_status mb_dataset_labels(const mb_dataset* dataset, int* out, size_t n);
MINIBERT_API mb_status mb_dataset_split(const mb_dataset* dataset, double train_fraction, uint64_t seed,
                                        mb_dataset** train, mb_dataset** test);
MINIBERT_API void mb_dataset_free(mb_dataset* dataset);

/* ---- fine-tuning ---- */

typedef struct mb_finetune_options {
  double lr;
  double lr_factor;
  int patience;
  size_t max_epochs;
  size_t batch_size;
  size_t max_len;
  uint64_t seed;
  double validation_split;
} mb_finetune_options;

MINIBERT_API void mb_finetune_options_default(mb_finetune_options* options);

typedef struct mb_epoch_record {
  int epoch;
  double train_loss;
  double train_auc;
  double test_loss;
  double test_auc;
  double threshold;
  double test_f1;
  double lr;
} mb_epoch_record;

typedef void (*mb_epoch_fn)(const mb_epoch_record* record, void* user);

/* Replaces `model` with the fine-tuned weights. A non-NULL epoch_log_path
   receives the per-epoch table. */
MINIBERT_API mb_status mb_finetune(mb_model* model, const mb_vocab* vocab, const mb_dataset* train,
                                   const mb_dataset* test, const mb_finetune_options* options,
                                   const char* epoch_log_path, mb_epoch_fn on_epoch, void* user);

/* Sentiment-head probabilities for every sentence, eval mode. */
MINIBERT_API mb_status mb_predict_sentiment(const mb_model* model, const mb_vocab* vocab,
                                            const mb_dataset* dataset, size_t max_len, double* out,
                                            size_t n);

/* ---- metrics ---- */

MINIBERT_API mb_status mb_auc(const double* scores, const int* labels, size_t n, double* out);
/* Sweeps the 99-point grid; a non-NULL report_path receives the F1 table. */
MINIBERT_API mb_status mb_threshold_sweep(const double* scores, const int* labels, size_t n,
                                          double* best_threshold, double* best_f1,
                                          const char* report_path);

/* ---- frozen-encoder features and logistic regression ---- */

enum { MB_FEATURES_CLS = 0, MB_FEATURES_BAG_OF_IDS = 1 };

typedef struct mb_features mb_features;

MINIBERT_API mb_status mb_features_extract(const mb_model* model, const mb_vocab* vocab,
                                           const mb_dataset* dataset, size_t max_len, int kind,
                                           mb_features** out);
MINIBERT_API mb_status mb_features_save(const mb_features* features, const char* features_path,
                                        const char* labels_path);
MINIBERT_API mb_status mb_features_load(const char* features_path, const char* labels_path,
                                        mb_features** out);
MINIBERT_API size_t mb_features_rows(const mb_features* features);
MINIBERT_API size_t mb_features_cols(const mb_features* features);
MINIBERT_API void mb_features_free(mb_features* features);

typedef struct mb_logreg_options {
  double lr;
  size_t steps;
  double l2;
} mb_logreg_options;

MINIBERT_API void mb_logreg_options_default(mb_logreg_options* options);

typedef struct mb_logreg mb_logreg;

/* A non-NULL loss_log_path receives the objective after every step. */
MINIBERT_API mb_status mb_logreg_train(const mb_features* features, const mb_logreg_options* options,
                                       const char* loss_log_path, mb_logreg** out);
MINIBERT_API mb_status mb_logreg_save(const mb_logreg* model, const char* path);
MINIBERT_API mb_status mb_logreg_load(const char* path, mb_logreg** out);
MINIBERT_API mb_status mb_logreg_predict(const mb_logreg* model, const mb_features* features, double* out,
                                         size_t n);
MINIBERT_API void mb_logreg_free(mb_logreg* model);

typedef struct mb_pipeline_report {
  size_t n_train;
  size_t n_test;
  size_t feature_dim;
  double accuracy;
  double auc;
  double best_threshold;
  double best_f1;
  double majority_baseline;
} mb_pipeline_report;

/* Extract features for both halves, fit logistic regression on train and
   score test. A non-NULL report_path receives key=value lines. */
MINIBERT_API mb_status mb_evaluate_pipeline(const mb_dataset* train, const mb_dataset* test,
                                            const mb_model* model, const mb_vocab* vocab, size_t max_len,
                                            const mb_logreg_options* options, int kind,
                                            const char* report_path, mb_pipeline_report* out);

#ifdef __cplusplus
}
#endif

#endif /* MINIBERT_MINIBERT_H_ */
