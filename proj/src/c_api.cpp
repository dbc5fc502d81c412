#include "minibert/minibert.h"

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <new>
#include <optional>
#include <string>
#include <utility>

#include "minibert/dataset.hpp"
#include "minibert/error.hpp"
#include "minibert/log.hpp"
#include "minibert/metrics.hpp"
#include "minibert/model.hpp"
#include "minibert/parallel.hpp"
#include "minibert/pipeline.hpp"
#include "minibert/tokenizer.hpp"
#include "minibert/training.hpp"

using namespace minibert;

struct mb_vocab {
  Vocab vocab;
};

struct mb_model {
  Model<float> model;
};

struct mb_dataset {
  LabeledDataset data;
};

struct mb_features {
  FeatureMatrix matrix;
};

struct mb_logreg {
  LogRegModel model;
};

namespace {

thread_local std::string t_last_error;

mb_status ToStatus(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return MB_ERR_INVALID_ARGUMENT;
    case ErrorKind::kDimension: return MB_ERR_DIMENSION;
    case ErrorKind::kContract: return MB_ERR_CONTRACT;
    case ErrorKind::kParse: return MB_ERR_PARSE;
    case ErrorKind::kIo: return MB_ERR_IO;
    case ErrorKind::kUndefinedMetric: return MB_ERR_UNDEFINED_METRIC;
    case ErrorKind::kMismatch: return MB_ERR_MISMATCH;
  }
  return MB_ERR_INTERNAL;
}

mb_status Failure(mb_status status, std::string message) {
  t_last_error = std::move(message);
  return status;
}

template <class F>
mb_status Guard(F&& body) {
  try {
    body();
    return MB_OK;
  } catch (const Error& e) {
    return Failure(ToStatus(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return Failure(MB_ERR_OUT_OF_MEMORY, "out of memory");
  } catch (const std::exception& e) {
    return Failure(MB_ERR_INTERNAL, e.what());
  } catch (...) {
    return Failure(MB_ERR_INTERNAL, "unknown exception");
  }
}

void Require(bool ok, const char* what) {
  if (!ok) Fail(ErrorKind::kInvalidArgument, std::string(what) + " must not be null");
}

ModelConfig FromC(const mb_model_config& c) {
  ModelConfig m;
  m.vocab_size = c.vocab_size;
  m.hidden_dim = c.hidden_dim;
  m.num_layers = c.num_layers;
  m.num_heads = c.num_heads;
  m.ff_dim = c.ff_dim;
  m.max_len = c.max_len;
  m.dropout = c.dropout;
  m.tie_mlm_weights = c.tie_mlm_weights != 0;
  m.rtd_head = c.rtd_head != 0;
  return m;
}

mb_model_config ToC(const ModelConfig& m) {
  mb_model_config c;
  c.vocab_size = m.vocab_size;
  c.hidden_dim = m.hidden_dim;
  c.num_layers = m.num_layers;
  c.num_heads = m.num_heads;
  c.ff_dim = m.ff_dim;
  c.max_len = m.max_len;
  c.dropout = m.dropout;
  c.tie_mlm_weights = m.tie_mlm_weights ? 1 : 0;
  c.rtd_head = m.rtd_head ? 1 : 0;
  return c;
}

void WriteText(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  out << text;
  if (!out) Fail(ErrorKind::kIo, "failed writing " + path);
}

std::mutex g_log_mutex;
mb_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

}  // namespace

extern "C" {

const char* mb_version(void) { return "0.1.0"; }

const char* mb_status_name(mb_status status) {
  switch (status) {
    case MB_OK: return "ok";
    case MB_ERR_INVALID_ARGUMENT: return "invalid argument";
    case MB_ERR_DIMENSION: return "dimension error";
    case MB_ERR_CONTRACT: return "contract violation";
    case MB_ERR_PARSE: return "parse error";
    case MB_ERR_IO: return "i/o error";
    case MB_ERR_UNDEFINED_METRIC: return "undefined metric";
    case MB_ERR_MISMATCH: return "mismatch";
    case MB_ERR_OUT_OF_MEMORY: return "out of memory";
    case MB_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* mb_last_error(void) { return t_last_error.c_str(); }

void mb_set_threads(int n) { SetNumThreads(n); }
int mb_get_threads(void) { return NumThreads(); }
void mb_set_deterministic(int on) { SetDeterministic(on != 0); }

void mb_set_log_callback(mb_log_fn fn, void* user) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  g_log_fn = fn;
  g_log_user = user;
  if (fn == nullptr) {
    SetLogSink({});
    return;
  }
  SetLogSink([](LogLevel level, std::string_view message) {
    std::lock_guard<std::mutex> inner(g_log_mutex);
    if (g_log_fn == nullptr) return;
    const std::string text(message);
    g_log_fn(level == LogLevel::kWarning ? MB_LOG_WARNING : MB_LOG_INFO, text.c_str(), g_log_user);
  });
}

// ---- vocabulary ----

mb_status mb_vocab_build(const char* corpus_path, size_t target_size, mb_vocab** out) {
  return Guard([&] {
    Require(corpus_path && out, "corpus_path and out");
    const auto corpus = LoadCorpus(corpus_path);
    *out = new mb_vocab{BuildVocab(corpus, target_size)};
  });
}

mb_status mb_vocab_load(const char* path, mb_vocab** out) {
  return Guard([&] {
    Require(path && out, "path and out");
    *out = new mb_vocab{Vocab::Load(path)};
  });
}

mb_status mb_vocab_save(const mb_vocab* vocab, const char* path) {
  return Guard([&] {
    Require(vocab && path, "vocab and path");
    vocab->vocab.Save(path);
  });
}

size_t mb_vocab_size(const mb_vocab* vocab) { return vocab ? vocab->vocab.size() : 0; }
void mb_vocab_free(mb_vocab* vocab) { delete vocab; }

// ---- model ----

void mb_model_config_default(mb_model_config* config) {
  if (config) *config = ToC(ModelConfig{});
}

mb_status mb_model_create(const mb_model_config* config, uint64_t seed, mb_model** out) {
  return Guard([&] {
    Require(config && out, "config and out");
    *out = new mb_model{Model<float>(FromC(*config), seed)};
  });
}

mb_status mb_model_load(const char* path, const mb_model_config* expected, mb_model** out) {
  return Guard([&] {
    Require(path && out, "path and out");
    *out = new mb_model{expected ? LoadCheckpoint(path, FromC(*expected)) : LoadCheckpoint(path)};
  });
}

mb_status mb_model_save(const mb_model* model, const char* path) {
  return Guard([&] {
    Require(model && path, "model and path");
    SaveCheckpoint(model->model, path);
  });
}

mb_status mb_model_get_config(const mb_model* model, mb_model_config* out) {
  return Guard([&] {
    Require(model && out, "model and out");
    *out = ToC(model->model.config());
  });
}

void mb_model_free(mb_model* model) { delete model; }

// ---- pretraining ----

void mb_pretrain_options_default(mb_pretrain_options* options) {
  if (!options) return;
  const PretrainOptions d;
  options->seed = d.seed;
  options->steps = d.steps;
  options->batch_size = d.batch_size;
  options->lr = d.lr;
  options->max_len = d.max_len;
  options->mask_policy = ToString(d.policy);
  options->select_rate = d.select_rate;
  options->geo_p = d.geo_p;
  options->max_span = d.max_span;
  options->checkpoint_every = d.checkpoint_every;
  options->checkpoint_prefix = nullptr;
}

mb_status mb_pretrain(mb_model* model, const char* corpus_path, const mb_vocab* vocab,
                      const mb_pretrain_options* options, const char* loss_log_path,
                      mb_pretrain_step_fn on_step, void* user) {
  return Guard([&] {
    Require(model && corpus_path && vocab && options, "model, corpus_path, vocab and options");
    PretrainOptions o;
    o.seed = options->seed;
    o.steps = options->steps;
    o.batch_size = options->batch_size;
    o.lr = options->lr;
    o.max_len = options->max_len;
    o.policy = ParseMaskPolicy(options->mask_policy ? options->mask_policy : "token");
    o.select_rate = options->select_rate;
    o.geo_p = options->geo_p;
    o.max_span = options->max_span;
    o.checkpoint_every = options->checkpoint_every;
    const std::string prefix = options->checkpoint_prefix ? options->checkpoint_prefix : "";
    if (o.checkpoint_every > 0 && prefix.empty()) {
      Fail(ErrorKind::kInvalidArgument, "checkpoint_every needs a checkpoint_prefix");
    }
    const auto corpus = LoadCorpus(corpus_path);
    CheckpointCallback save;
    if (o.checkpoint_every > 0) {
      save = [&](std::size_t step, const Model<float>& m) { SaveCheckpoint(m, prefix + std::to_string(step) + ".bin"); };
    }
    PretrainProgress progress;
    if (on_step) {
      progress = [&](const PretrainStepLoss& l) { on_step(l.step, l.total, l.mlm, l.nsp, l.rtd, user); };
    }
    PretrainResult r = Pretrain(model->model, corpus, vocab->vocab, o, save, progress);
    if (loss_log_path) WriteText(loss_log_path, FormatLossLog(r.losses));
    model->model = std::move(r.model);
  });
}

// ---- labeled data ----

mb_status mb_dataset_load_tsv(const char* path, mb_dataset** out) {
  return Guard([&] {
    Require(path && out, "path and out");
    *out = new mb_dataset{LoadTsv(path)};
  });
}

mb_status mb_dataset_save_tsv(const mb_dataset* dataset, const char* path) {
  return Guard([&] {
    Require(dataset && path, "dataset and path");
    SaveTsv(dataset->data, path);
  });
}

size_t mb_dataset_size(const mb_dataset* dataset) { return dataset ? dataset->data.size() : 0; }

mb_status mb_dataset_labels(const mb_dataset* dataset, int* out, size_t n) {
  return Guard([&] {
    Require(dataset && (out || n == 0), "dataset and out");
    if (n != dataset->data.size()) Fail(ErrorKind::kDimension, "label buffer size differs from dataset size");
    std::copy(dataset->data.labels.begin(), dataset->data.labels.end(), out);
  });
}

mb_status mb_dataset_split(const mb_dataset* dataset, double train_fraction, uint64_t seed, mb_dataset** train,
                           mb_dataset** test) {
  return Guard([&] {
    Require(dataset && train && test, "dataset, train and test");
    auto halves = Split(dataset->data, train_fraction, seed);
    auto* a = new mb_dataset{std::move(halves.first)};
    *train = a;
    *test = new mb_dataset{std::move(halves.second)};
  });
}

void mb_dataset_free(mb_dataset* dataset) { delete dataset; }

// ---- fine-tuning ----

void mb_finetune_options_default(mb_finetune_options* options) {
  if (!options) return;
  const FinetuneOptions d;
  options->lr = d.lr;
  options->lr_factor = d.lr_factor;
  options->patience = d.patience;
  options->max_epochs = d.max_epochs;
  options->batch_size = d.batch_size;
  options->max_len = d.max_len;
  options->seed = d.seed;
  options->validation_split = d.validation_split;
}

mb_status mb_finetune(mb_model* model, const mb_vocab* vocab, const mb_dataset* train, const mb_dataset* test,
                      const mb_finetune_options* options, const char* epoch_log_path, mb_epoch_fn on_epoch,
                      void* user) {
  return Guard([&] {
    Require(model && vocab && train && test && options, "model, vocab, train, test and options");
    FinetuneOptions o;
    o.lr = options->lr;
    o.lr_factor = options->lr_factor;
    o.patience = options->patience;
    o.max_epochs = options->max_epochs;
    o.batch_size = options->batch_size;
    o.max_len = options->max_len;
    o.seed = options->seed;
    o.validation_split = options->validation_split;
    EpochProgress progress;
    if (on_epoch) {
      progress = [&](const EpochRecord& r) {
        const mb_epoch_record c{r.epoch,    r.train_loss, r.train_auc, r.test_loss,
                                r.test_auc, r.threshold,  r.test_f1,   r.lr};
        on_epoch(&c, user);
      };
    }
    FinetuneResult r = Finetune(model->model, vocab->vocab, train->data, test->data, o, progress);
    if (epoch_log_path) WriteEpochLog(r.log, epoch_log_path);
    model->model = std::move(r.model);
  });
}

mb_status mb_predict_sentiment(const mb_model* model, const mb_vocab* vocab, const mb_dataset* dataset,
                               size_t max_len, double* out, size_t n) {
  return Guard([&] {
    Require(model && vocab && dataset && (out || n == 0), "model, vocab, dataset and out");
    if (n != dataset->data.size()) Fail(ErrorKind::kDimension, "score buffer size differs from dataset size");
    if (vocab->vocab.size() != model->model.config().vocab_size) {
      Fail(ErrorKind::kMismatch, "vocabulary has " + std::to_string(vocab->vocab.size()) +
                                     " tokens but the model expects " +
                                     std::to_string(model->model.config().vocab_size));
    }
    const std::size_t len = std::min(max_len, model->model.config().max_len);
    std::vector<TokenizedPair> inputs;
    inputs.reserve(n);
    for (const auto& s : dataset->data.sentences) inputs.push_back(EncodePair(vocab->vocab, s, std::nullopt, len));
    const auto scores = SigmoidScores(SentimentLogits(model->model, inputs));
    std::copy(scores.begin(), scores.end(), out);
  });
}

// ---- metrics ----

mb_status mb_auc(const double* scores, const int* labels, size_t n, double* out) {
  return Guard([&] {
    Require(scores && labels && out, "scores, labels and out");
    *out = Auc(std::span<const double>(scores, n), std::span<const int>(labels, n));
  });
}

mb_status mb_threshold_sweep(const double* scores, const int* labels, size_t n, double* best_threshold,
                             double* best_f1, const char* report_path) {
  return Guard([&] {
    Require(scores && labels, "scores and labels");
    const ThresholdReport r = ThresholdSweep(std::span<const double>(scores, n), std::span<const int>(labels, n));
    if (best_threshold) *best_threshold = r.best_threshold;
    if (best_f1) *best_f1 = r.best_f1;
    if (report_path) WriteThresholdReport(r, report_path);
  });
}

// ---- features and logistic regression ----

mb_status mb_features_extract(const mb_model* model, const mb_vocab* vocab, const mb_dataset* dataset,
                              size_t max_len, int kind, mb_features** out) {
  return Guard([&] {
    Require(vocab && dataset && out, "vocab, dataset and out");
    if (kind == MB_FEATURES_CLS) {
      Require(model != nullptr, "model");
      *out = new mb_features{ExtractClsFeatures(dataset->data, model->model, vocab->vocab, max_len).matrix};
    } else if (kind == MB_FEATURES_BAG_OF_IDS) {
      *out = new mb_features{BagOfIdsFeatures(dataset->data, vocab->vocab)};
    } else {
      Fail(ErrorKind::kInvalidArgument, "unknown feature kind " + std::to_string(kind));
    }
  });
}

mb_status mb_features_save(const mb_features* features, const char* features_path, const char* labels_path) {
  return Guard([&] {
    Require(features && features_path && labels_path, "features and paths");
    SaveFeatures(features->matrix, features_path, labels_path);
  });
}

mb_status mb_features_load(const char* features_path, const char* labels_path, mb_features** out) {
  return Guard([&] {
    Require(features_path && labels_path && out, "paths and out");
    *out = new mb_features{LoadFeatures(features_path, labels_path)};
  });
}

size_t mb_features_rows(const mb_features* features) { return features ? features->matrix.rows : 0; }
size_t mb_features_cols(const mb_features* features) { return features ? features->matrix.cols : 0; }
void mb_features_free(mb_features* features) { delete features; }

void mb_logreg_options_default(mb_logreg_options* options) {
  if (!options) return;
  const LogRegOptions d;
  options->lr = d.lr;
  options->steps = d.steps;
  options->l2 = d.l2;
}

mb_status mb_logreg_train(const mb_features* features, const mb_logreg_options* options, const char* loss_log_path,
                          mb_logreg** out) {
  return Guard([&] {
    Require(features && options && out, "features, options and out");
    LogRegModel m = TrainLogReg(features->matrix, LogRegOptions{options->lr, options->steps, options->l2});
    if (loss_log_path) {
      std::string text = "step\tobjective\n";
      char buf[64];
      for (std::size_t i = 0; i < m.loss_history.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu\t%.9f\n", i, m.loss_history[i]);
        text += buf;
      }
      WriteText(loss_log_path, text);
    }
    *out = new mb_logreg{std::move(m)};
  });
}

mb_status mb_logreg_save(const mb_logreg* model, const char* path) {
  return Guard([&] {
    Require(model && path, "model and path");
    SaveLogReg(model->model, path);
  });
}

mb_status mb_logreg_load(const char* path, mb_logreg** out) {
  return Guard([&] {
    Require(path && out, "path and out");
    *out = new mb_logreg{LoadLogReg(path)};
  });
}

mb_status mb_logreg_predict(const mb_logreg* model, const mb_features* features, double* out, size_t n) {
  return Guard([&] {
    Require(model && features && (out || n == 0), "model, features and out");
    if (n != features->matrix.rows) Fail(ErrorKind::kDimension, "score buffer size differs from row count");
    const auto scores = PredictLogReg(model->model, features->matrix);
    std::copy(scores.begin(), scores.end(), out);
  });
}

void mb_logreg_free(mb_logreg* model) { delete model; }

mb_status mb_evaluate_pipeline(const mb_dataset* train, const mb_dataset* test, const mb_model* model,
                               const mb_vocab* vocab, size_t max_len, const mb_logreg_options* options, int kind,
                               const char* report_path, mb_pipeline_report* out) {
  return Guard([&] {
    Require(train && test && model && vocab && options, "train, test, model, vocab and options");
    if (kind != MB_FEATURES_CLS && kind != MB_FEATURES_BAG_OF_IDS) {
      Fail(ErrorKind::kInvalidArgument, "unknown feature kind " + std::to_string(kind));
    }
    const PipelineReport r =
        EvaluatePipeline(train->data, test->data, model->model, vocab->vocab, max_len,
                         LogRegOptions{options->lr, options->steps, options->l2},
                         kind == MB_FEATURES_CLS ? FeatureKind::kCls : FeatureKind::kBagOfIds);
    if (report_path) WriteText(report_path, FormatPipelineReport(r));
    if (out) {
      *out = mb_pipeline_report{r.n_train, r.n_test,   r.feature_dim, r.accuracy,
                                r.auc,     r.best_threshold, r.best_f1, r.majority_baseline};
    }
  });
}

}  // extern "C"
