#include "minibert/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "minibert/corruption.hpp"
#include "minibert/error.hpp"
#include "minibert/log.hpp"
#include "minibert/metrics.hpp"
#include "minibert/parallel.hpp"

namespace minibert {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void AppendFloat(std::string& out, const char* fmt, double v) {
  if (std::isnan(v)) {
    out += "nan";
    return;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  out += buf;
}

double AucOrNaN(std::span<const double> scores, std::span<const int> labels) {
  try {
    return Auc(scores, labels);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kUndefinedMetric) throw;
    return kNaN;
  }
}

bool SingleClass(std::span<const int> labels) {
  return std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; });
}

}  // namespace

// ---------------------------------------------------------------------------
// Learning-rate policy

const char* ToString(LrDecision decision) {
  switch (decision) {
    case LrDecision::kContinue: return "CONTINUE";
    case LrDecision::kReduced: return "REDUCED";
    case LrDecision::kStop: return "STOP";
  }
  return "?";
}

void LrPolicyState::Validate() const {
  if (!(current_lr > 0.0)) Fail(ErrorKind::kInvalidArgument, "learning rate must be > 0");
  if (!(reduction_factor > 0.0 && reduction_factor < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "lr reduction factor must be in (0, 1)");
  }
  if (patience < 1) Fail(ErrorKind::kInvalidArgument, "patience must be >= 1");
  if (epochs_since_improvement < 0 || epochs_since_improvement > patience) {
    Fail(ErrorKind::kInvalidArgument, "non-improvement counter out of range");
  }
}

LrUpdate UpdateLr(const LrPolicyState& state, double auc) {
  state.Validate();
  if (!std::isnan(auc) && !(auc >= 0.0 && auc <= 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "AUC must be in [0, 1], got " + std::to_string(auc));
  }
  LrUpdate u;
  u.state = state;
  if (!std::isnan(auc) && auc > state.best_auc) {
    u.state.best_auc = auc;
    u.state.epochs_since_improvement = 0;
    u.decision = LrDecision::kContinue;
    return u;
  }
  // Floor keeps the rate positive under very long patience.
  u.state.current_lr = std::max(state.current_lr * state.reduction_factor, std::numeric_limits<double>::min());
  u.state.epochs_since_improvement = std::min(state.epochs_since_improvement + 1, state.patience);
  u.decision = LrDecision::kReduced;
  u.stop = u.state.epochs_since_improvement >= state.patience;
  return u;
}

std::vector<LrDecision> ReplayLrPolicy(LrPolicyState& state, std::span<const double> aucs) {
  std::vector<LrDecision> trace;
  for (double auc : aucs) {
    const LrUpdate u = UpdateLr(state, auc);
    state = u.state;
    trace.push_back(u.decision);
    if (u.stop) {
      trace.push_back(LrDecision::kStop);
      break;
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Epoch log

std::string EpochLogHeader() {
  return "epoch\ttrain_loss\ttrain_auc\ttest_loss\ttest_auc\tthreshold\ttest_f1\tlr";
}

std::string FormatEpochRecord(const EpochRecord& r) {
  std::string out = std::to_string(r.epoch);
  for (double v : {r.train_loss, r.train_auc, r.test_loss, r.test_auc}) {
    out += '\t';
    AppendFloat(out, "%.6f", v);
  }
  out += '\t';
  AppendFloat(out, "%.2f", r.threshold);
  out += '\t';
  AppendFloat(out, "%.6f", r.test_f1);
  out += '\t';
  AppendFloat(out, "%.6e", r.lr);
  return out;
}

std::string FormatEpochLog(std::span<const EpochRecord> records) {
  std::string out = EpochLogHeader() + "\n";
  for (const auto& r : records) out += FormatEpochRecord(r) + "\n";
  return out;
}

void WriteEpochLog(std::span<const EpochRecord> records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  out << FormatEpochLog(records);
  if (!out) Fail(ErrorKind::kIo, "failed writing " + path);
}

// ---------------------------------------------------------------------------
// Pretraining

const char* ToString(MaskPolicy policy) {
  switch (policy) {
    case MaskPolicy::kToken: return "token";
    case MaskPolicy::kWholeWord: return "wwm";
    case MaskPolicy::kSpan: return "span";
    case MaskPolicy::kElectra: return "electra";
  }
  return "?";
}

MaskPolicy ParseMaskPolicy(std::string_view name) {
  for (MaskPolicy p : {MaskPolicy::kToken, MaskPolicy::kWholeWord, MaskPolicy::kSpan,
                       MaskPolicy::kElectra}) {
    if (name == ToString(p)) return p;
  }
  Fail(ErrorKind::kInvalidArgument,
       "unknown mask policy '" + std::string(name) + "' (expected token, wwm, span or electra)");
}

std::vector<std::string> LoadCorpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(line);
  }
  return lines;
}

NspPair SampleNspPair(std::size_t corpus_size, Rng& rng) {
  if (corpus_size < 2) Fail(ErrorKind::kInvalidArgument, "NSP sampling needs at least 2 sentences");
  NspPair p;
  p.a = rng.Below(corpus_size - 1);
  if (rng.Bernoulli(0.5)) {
    p.b = p.a + 1;
    p.label = 1;
    return p;
  }
  // Uniform over every sentence except the true successor.
  p.b = rng.Below(corpus_size - 1);
  if (p.b >= p.a + 1) ++p.b;
  p.label = 0;
  return p;
}

namespace {

// Samples one non-special id per masked position from the model's own MLM
// distribution (the generator); no gradient flows through the draw.
std::vector<std::int32_t> SampleGenerator(std::span<const float> logits, std::size_t row_offset,
                                          std::size_t vocab, const CorruptionPlan& plan, Rng& rng) {
  std::vector<std::int32_t> out;
  std::vector<double> probs(vocab);
  for (std::size_t i = 0; i < plan.action.size(); ++i) {
    if (plan.action[i] != Action::kMasked) continue;
    const float* row = logits.data() + (row_offset + i) * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = kNumSpecialTokens; v < vocab; ++v) mx = std::max(mx, double(row[v]));
    double total = 0.0;
    for (std::size_t v = kNumSpecialTokens; v < vocab; ++v) {
      probs[v] = std::exp(double(row[v]) - mx);
      total += probs[v];
    }
    double u = rng.Uniform() * total;
    std::size_t pick = vocab - 1;
    for (std::size_t v = kNumSpecialTokens; v < vocab; ++v) {
      u -= probs[v];
      if (u < 0.0) {
        pick = v;
        break;
      }
    }
    out.push_back(static_cast<std::int32_t>(pick));
  }
  return out;
}

}  // namespace

PretrainResult Pretrain(Model<float> model, std::span<const std::string> corpus,
                        const Vocab& vocab, const PretrainOptions& options,
                        const CheckpointCallback& on_checkpoint, const PretrainProgress& on_step) {
  const ModelConfig& cfg = model.config();
  if (corpus.size() < 2) {
    Fail(ErrorKind::kInvalidArgument, "pretraining corpus needs at least 2 sentences, got " +
                                          std::to_string(corpus.size()));
  }
  if (vocab.size() != cfg.vocab_size) {
    Fail(ErrorKind::kMismatch, "vocabulary has " + std::to_string(vocab.size()) +
                                   " tokens but the model expects " + std::to_string(cfg.vocab_size));
  }
  if (options.batch_size == 0) Fail(ErrorKind::kInvalidArgument, "batch size must be > 0");
  if (!(options.lr > 0.0)) Fail(ErrorKind::kInvalidArgument, "learning rate must be > 0");
  const bool electra = options.policy == MaskPolicy::kElectra;
  if (electra && !cfg.rtd_head) {
    Fail(ErrorKind::kInvalidArgument, "the electra policy needs a model with an RTD head");
  }
  const std::size_t max_len = std::min(options.max_len, cfg.max_len);
  if (max_len < 3) Fail(ErrorKind::kInvalidArgument, "max_len must be >= 3");

  std::vector<TokenizedText> texts;
  texts.reserve(corpus.size());
  for (const auto& s : corpus) texts.push_back(Tokenize(vocab, s));

  unsigned groups = kEncoderParams | kMlmHeadParams | kNspHeadParams;
  if (electra) groups |= kRtdHeadParams;
  const auto params = model.Parameters(groups);
  AdamState adam = MakeAdamState<float>(params);

  std::vector<PretrainStepLoss> losses;
  const std::uint64_t seed = options.seed;
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<TokenizedPair> pairs;
    std::vector<CorruptionPlan> plans;
    std::vector<std::int32_t> nsp_labels;
    for (std::size_t j = 0; j < options.batch_size; ++j) {
      Rng pick_rng(DeriveSeed(seed, {step, j, 0}));
      const NspPair np = SampleNspPair(texts.size(), pick_rng);
      pairs.push_back(EncodePair(vocab, texts[np.a], &texts[np.b], max_len));
      nsp_labels.push_back(np.label);
      const std::uint64_t cseed = DeriveSeed(seed, {step, j, 1});
      switch (options.policy) {
        case MaskPolicy::kToken:
        case MaskPolicy::kElectra:
          plans.push_back(MlmCorrupt(pairs.back(), vocab, options.select_rate, cseed));
          break;
        case MaskPolicy::kWholeWord:
          plans.push_back(WwmCorrupt(pairs.back(), vocab, options.select_rate, cseed));
          break;
        case MaskPolicy::kSpan:
          plans.push_back(SpanCorrupt(pairs.back(), vocab, options.select_rate, options.geo_p,
                                      options.max_span, cseed));
          break;
      }
    }
    Batch batch = Batch::FromPairs(pairs);
    const std::size_t L = batch.seq_len;
    for (std::size_t r = 0; r < pairs.size(); ++r) {
      std::copy_n(plans[r].input_ids.begin(), L, batch.ids.begin() + static_cast<std::ptrdiff_t>(r * L));
    }

    ForwardContext ctx{true, DeriveSeed(seed, {step, 2}), 0};
    const Tensor<float> hidden = model.Encode(batch, ctx);
    const Tensor<float> mlm_logits = model.MlmLogits(hidden);
    const Tensor<float> mlm = MaskedMlmLoss(mlm_logits, PlanLabels(plans, L));
    const Tensor<float> nsp = NspLoss(model.NspLogits(hidden), nsp_labels);
    Tensor<float> total = mlm + nsp;
    PretrainStepLoss rec;
    rec.step = step;

    if (electra) {
      Batch disc = batch;
      std::vector<float> targets(batch.ids.size(), 0.0f);
      std::vector<std::uint8_t> mask(batch.ids.size(), 0);
      for (std::size_t r = 0; r < pairs.size(); ++r) {
        Rng gen_rng(DeriveSeed(seed, {step, r, 3}));
        const auto predicted = SampleGenerator(mlm_logits.data(), r * L, cfg.vocab_size, plans[r], gen_rng);
        const RtdExample ex = RtdLabel(pairs[r], plans[r], predicted);
        for (std::size_t i = 0; i < L; ++i) {
          disc.ids[r * L + i] = ex.input_ids[i];
          targets[r * L + i] = ex.rtd_labels[i] == RtdTag::kReplaced ? 1.0f : 0.0f;
          mask[r * L + i] = IsEligible(pairs[r], i) ? 1 : 0;
        }
      }
      const Tensor<float> disc_hidden = model.Encode(disc, ctx);
      const Tensor<float> rtd = BceWithLogits(model.RtdLogits(disc_hidden),
                                              std::span<const float>(targets), mask);
      rec.rtd = rtd.item();
      total = total + rtd;
    }
    rec.mlm = mlm.item();
    rec.nsp = nsp.item();
    rec.total = total.item();

    ZeroGrads<float>(params);
    total.Backward();
    AdamStep<float>(params, adam, options.lr);

    losses.push_back(rec);
    if (on_step) on_step(rec);
    if (on_checkpoint && options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0) {
      on_checkpoint(step + 1, model);
    }
  }
  ZeroGrads<float>(params);
  return PretrainResult{std::move(model), std::move(losses)};
}

std::string FormatLossLog(std::span<const PretrainStepLoss> losses) {
  std::string out = "step\ttotal\tmlm\tnsp\trtd\n";
  for (const auto& l : losses) {
    out += std::to_string(l.step);
    for (double v : {l.total, l.mlm, l.nsp, l.rtd}) {
      out += '\t';
      AppendFloat(out, "%.6f", v);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

std::vector<double> SentimentLogits(const Model<float>& model, std::span<const TokenizedPair> inputs,
                                    std::size_t batch_size) {
  if (batch_size == 0) Fail(ErrorKind::kInvalidArgument, "batch size must be > 0");
  std::vector<double> out(inputs.size());
  const std::size_t batches = (inputs.size() + batch_size - 1) / batch_size;
  ParallelFor(batches, 1, [&](std::size_t b0, std::size_t b1) {
    NoGradGuard no_grad;
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t begin = b * batch_size;
      const std::size_t end = std::min(inputs.size(), begin + batch_size);
      const Batch batch = Batch::FromPairs(inputs.subspan(begin, end - begin));
      ForwardContext ctx;
      const Tensor<float> logits = model.SentimentLogits(model.Encode(batch, ctx));
      for (std::size_t i = begin; i < end; ++i) out[i] = logits.data()[i - begin];
    }
  });
  return out;
}

double MeanBce(std::span<const double> logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) Fail(ErrorKind::kDimension, "logit/label count mismatch");
  if (logits.empty()) return kNaN;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return total / static_cast<double>(logits.size());
}

std::vector<double> SigmoidScores(std::span<const double> logits) {
  std::vector<double> s(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    s[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return s;
}

namespace {

struct EncodedSet {
  std::vector<TokenizedPair> inputs;
  std::vector<int> labels;
};

EncodedSet EncodeSet(const Vocab& vocab, const LabeledDataset& ds, std::size_t max_len) {
  EncodedSet e;
  e.labels = ds.labels;
  e.inputs.reserve(ds.size());
  for (const auto& s : ds.sentences) e.inputs.push_back(EncodePair(vocab, s, std::nullopt, max_len));
  return e;
}

struct Evaluation {
  double loss = kNaN;
  double auc = kNaN;
  std::vector<double> scores;
};

Evaluation Evaluate(const Model<float>& model, const EncodedSet& set) {
  Evaluation ev;
  if (set.inputs.empty()) return ev;
  const auto logits = SentimentLogits(model, set.inputs);
  ev.loss = MeanBce(logits, set.labels);
  ev.scores = SigmoidScores(logits);
  ev.auc = AucOrNaN(ev.scores, set.labels);
  return ev;
}

}  // namespace

FinetuneResult Finetune(const Model<float>& start, const Vocab& vocab, const LabeledDataset& train,
                        const LabeledDataset& test, const FinetuneOptions& options,
                        const EpochProgress& on_epoch) {
  FinetuneResult result{start, {}};
  if (options.max_epochs == 0) return result;

  train.Validate();
  test.Validate();
  if (train.size() == 0) Fail(ErrorKind::kInvalidArgument, "training set is empty");
  if (options.batch_size == 0) Fail(ErrorKind::kInvalidArgument, "batch size must be > 0");
  if (!(options.validation_split >= 0.0 && options.validation_split < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "validation split must be in [0, 1)");
  }
  if (vocab.size() != start.config().vocab_size) {
    Fail(ErrorKind::kMismatch, "vocabulary has " + std::to_string(vocab.size()) +
                                   " tokens but the model expects " +
                                   std::to_string(start.config().vocab_size));
  }
  LrPolicyState policy;
  policy.current_lr = options.lr;
  policy.reduction_factor = options.lr_factor;
  policy.patience = options.patience;
  policy.Validate();

  const std::size_t max_len = std::min(options.max_len, start.config().max_len);
  LabeledDataset fit = train;
  LabeledDataset holdout;
  const bool use_validation = options.validation_split > 0.0;
  if (use_validation) {
    auto halves = Split(train, 1.0 - options.validation_split, DeriveSeed(options.seed, {0x76616cULL}));
    fit = std::move(halves.first);
    holdout = std::move(halves.second);
  }
  const EncodedSet fit_set = EncodeSet(vocab, fit, max_len);
  const EncodedSet test_set = EncodeSet(vocab, test, max_len);
  const EncodedSet holdout_set = EncodeSet(vocab, holdout, max_len);
  if (SingleClass(fit_set.labels)) {
    Log(LogLevel::kWarning, "training set has a single class; train AUC is undefined (nan)");
  }

  Model<float>& model = result.model;
  const auto params = model.Parameters(kEncoderParams | kSentimentHeadParams);
  AdamState adam = MakeAdamState<float>(params);
  std::vector<std::size_t> order(fit_set.inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
    Rng shuffle_rng(DeriveSeed(options.seed, {epoch, 0}));
    shuffle_rng.Shuffle(order.begin(), order.end());
    for (std::size_t begin = 0, bi = 0; begin < order.size(); begin += options.batch_size, ++bi) {
      const std::size_t end = std::min(order.size(), begin + options.batch_size);
      std::vector<TokenizedPair> pairs;
      std::vector<float> targets;
      for (std::size_t k = begin; k < end; ++k) {
        pairs.push_back(fit_set.inputs[order[k]]);
        targets.push_back(static_cast<float>(fit_set.labels[order[k]]));
      }
      const Batch batch = Batch::FromPairs(pairs);
      ForwardContext ctx{true, DeriveSeed(options.seed, {epoch, 1, bi}), 0};
      const Tensor<float> loss =
          BceWithLogits(model.SentimentLogits(model.Encode(batch, ctx)), std::span<const float>(targets));
      ZeroGrads<float>(params);
      loss.Backward();
      AdamStep<float>(params, adam, policy.current_lr);
    }
    ZeroGrads<float>(params);

    const Evaluation tr = Evaluate(model, fit_set);
    const Evaluation te = Evaluate(model, test_set);
    const Evaluation ho = use_validation ? Evaluate(model, holdout_set) : Evaluation{};
    const Evaluation& sel = use_validation ? ho : te;
    const EncodedSet& sel_set = use_validation ? holdout_set : test_set;

    EpochRecord rec;
    rec.epoch = static_cast<int>(epoch);
    rec.train_loss = tr.loss;
    rec.train_auc = tr.auc;
    rec.test_loss = te.loss;
    rec.test_auc = te.auc;
    rec.lr = policy.current_lr;
    rec.threshold = kNaN;
    rec.test_f1 = kNaN;
    if (!std::isnan(sel.auc)) {
      const ThresholdReport report = ThresholdSweep(sel.scores, sel_set.labels);
      rec.threshold = report.best_threshold;
      if (!use_validation) {
        rec.test_f1 = report.best_f1;
      } else if (!std::isnan(te.auc)) {
        rec.test_f1 = Prf1(te.scores, test_set.labels, report.best_threshold).f1;
      }
    }
    if (std::isnan(sel.auc)) {
      Log(LogLevel::kWarning, "epoch " + std::to_string(epoch) +
                                  ": AUC undefined (single-class labels); counted as no improvement");
    }
    const LrUpdate u = UpdateLr(policy, sel.auc);
    policy = u.state;
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (u.stop) break;
  }
  return result;
}

}  // namespace minibert
