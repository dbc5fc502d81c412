#pragma once

// Pretraining (MLM + NSP), sentiment fine-tuning and the plateau
// learning-rate policy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minibert/dataset.hpp"
#include "minibert/model.hpp"
#include "minibert/random.hpp"
#include "minibert/tokenizer.hpp"

namespace minibert {

// ---- learning-rate policy ----

enum class LrDecision { kContinue, kReduced, kStop };
const char* ToString(LrDecision decision);

struct LrPolicyState {
  double current_lr = 1e-6;
  double best_auc = 0.0;
  int epochs_since_improvement = 0;
  double reduction_factor = 0.2;
  int patience = 10;

  void Validate() const;
};

struct LrUpdate {
  LrPolicyState state;
  LrDecision decision = LrDecision::kContinue;  // kContinue or kReduced
  bool stop = false;  // the counter reached patience on this epoch
};

// An AUC strictly above the running best resets the counter (kContinue);
// anything else, NaN included, multiplies the rate by reduction_factor and
// bumps the counter (kReduced). Reaching `patience` sets `stop`; that
// epoch's reduction still applies.
LrUpdate UpdateLr(const LrPolicyState& state, double auc);

// Feeds AUCs in order until the policy stops; a stop appends kStop after
// the decision of the epoch that triggered it. `state` ends at the final
// policy state.
std::vector<LrDecision> ReplayLrPolicy(LrPolicyState& state, std::span<const double> aucs);

// ---- epoch log ----

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_auc = 0.0;
  double test_loss = 0.0;
  double test_auc = 0.0;
  double threshold = 0.0;
  double test_f1 = 0.0;
  double lr = 0.0;  // rate used for this epoch's updates
};

// Tab-separated; losses and metrics with 6 decimals, lr as %.6e so that
// repeatedly reduced rates stay readable. NaN prints as "nan".
std::string EpochLogHeader();
std::string FormatEpochRecord(const EpochRecord& record);
std::string FormatEpochLog(std::span<const EpochRecord> records);
void WriteEpochLog(std::span<const EpochRecord> records, const std::string& path);

// ---- pretraining ----

enum class MaskPolicy { kToken, kWholeWord, kSpan, kElectra };
const char* ToString(MaskPolicy policy);
// "token", "wwm", "span", "electra".
MaskPolicy ParseMaskPolicy(std::string_view name);

// One sentence per non-blank line; consecutive lines are continuous.
std::vector<std::string> LoadCorpus(const std::string& path);

struct NspPair {
  std::size_t a = 0;
  std::size_t b = 0;
  int label = 0;  // 1 when b directly follows a
};

// Half the draws (in expectation) are true successors; otherwise B is a
// uniformly drawn sentence other than the successor of A.
NspPair SampleNspPair(std::size_t corpus_size, Rng& rng);

struct PretrainOptions {
  std::uint64_t seed = 42;
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t max_len = 64;  // capped at the model's max_len
  MaskPolicy policy = MaskPolicy::kToken;
  double select_rate = 0.15;  // token / wwm / electra selection, span budget
  double geo_p = 0.2;
  int max_span = 10;
  std::size_t checkpoint_every = 0;  // 0 = no periodic checkpoints
};

struct PretrainStepLoss {
  std::size_t step = 0;
  double total = 0.0;
  double mlm = 0.0;
  double nsp = 0.0;
  double rtd = 0.0;
};

struct PretrainResult {
  Model<float> model;
  std::vector<PretrainStepLoss> losses;
};

using CheckpointCallback = std::function<void(std::size_t step, const Model<float>&)>;
using PretrainProgress = std::function<void(const PretrainStepLoss&)>;

// Trains `model` in place of a copy and returns it with per-step losses
// (each measured before that step's update). The electra policy requires
// a model built with rtd_head.
PretrainResult Pretrain(Model<float> model, std::span<const std::string> corpus,
                        const Vocab& vocab, const PretrainOptions& options,
                        const CheckpointCallback& on_checkpoint = {},
                        const PretrainProgress& on_step = {});

// "step\ttotal\tmlm\tnsp\trtd", 6 decimals.
std::string FormatLossLog(std::span<const PretrainStepLoss> losses);

// ---- fine-tuning ----

// Eval-mode sentiment logits for pre-encoded inputs; batches are scored in
// parallel and written to fixed slots.
std::vector<double> SentimentLogits(const Model<float>& model,
                                    std::span<const TokenizedPair> inputs,
                                    std::size_t batch_size = 32);
// Mean binary cross-entropy of sigmoid(logits).
double MeanBce(std::span<const double> logits, std::span<const int> labels);
std::vector<double> SigmoidScores(std::span<const double> logits);

struct FinetuneOptions {
  double lr = 1e-6;
  double lr_factor = 0.2;
  int patience = 10;
  std::size_t max_epochs = 500;
  std::size_t batch_size = 16;
  std::size_t max_len = 64;
  std::uint64_t seed = 42;
  // > 0 holds out this fraction of the training set; the threshold and the
  // lr policy then use it instead of the test set.
  double validation_split = 0.0;
};

struct FinetuneResult {
  Model<float> model;
  std::vector<EpochRecord> log;
};

using EpochProgress = std::function<void(const EpochRecord&)>;

FinetuneResult Finetune(const Model<float>& start, const Vocab& vocab,
                        const LabeledDataset& train, const LabeledDataset& test,
                        const FinetuneOptions& options, const EpochProgress& on_epoch = {});

}  // namespace minibert
