// minibert command-line tool. Talks to the library only through minibert.h.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "minibert/minibert.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Library failure carrying the status and message.
struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void Check(mb_status status, const std::string& context) {
  if (status != MB_OK) {
    throw Failure(context + ": " + mb_status_name(status) + ": " + mb_last_error());
  }
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* ptr = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(ptr); }
  T** out() {
    Free(ptr);
    ptr = nullptr;
    return &ptr;
  }
  T* get() const { return ptr; }
};

using Vocab = Handle<mb_vocab, mb_vocab_free>;
using Model = Handle<mb_model, mb_model_free>;
using Dataset = Handle<mb_dataset, mb_dataset_free>;
using Features = Handle<mb_features, mb_features_free>;
using LogReg = Handle<mb_logreg, mb_logreg_free>;

struct Common {
  std::string out_dir = "out";
  std::uint64_t seed = 42;
  int threads = 1;
  bool deterministic = false;
};

void AddCommon(CLI::App* sub, Common& c) {
  sub->add_option("--out-dir", c.out_dir, "Directory receiving every output file");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--threads", c.threads, "Worker threads for internal loops")->check(CLI::PositiveNumber);
  sub->add_flag("--deterministic", c.deterministic, "Single-threaded reductions for bit-identical reruns");
}

struct Arch {
  std::optional<std::size_t> hidden_dim, num_layers, num_heads, ff_dim, max_len;
};

// Optional flags on checkpoint consumers: when given they must agree with the checkpoint.
void AddArchChecks(CLI::App* sub, Arch& a) {
  sub->add_option("--hidden-dim", a.hidden_dim, "Expected hidden size of the checkpoint");
  sub->add_option("--layers", a.num_layers, "Expected encoder depth of the checkpoint");
  sub->add_option("--heads", a.num_heads, "Expected attention heads of the checkpoint");
  sub->add_option("--ff-dim", a.ff_dim, "Expected feed-forward width of the checkpoint");
  sub->add_option("--model-max-len", a.max_len, "Expected position table length of the checkpoint");
}

void RequireFiles(std::initializer_list<const std::string*> paths) {
  for (const std::string* p : paths) {
    if (!p->empty() && !fs::is_regular_file(*p)) throw Failure("file not found: " + *p);
  }
}

std::string OutPath(const Common& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

void Prepare(const Common& c, CLI::App* sub) {
  fs::create_directories(c.out_dir);
  mb_set_threads(c.threads);
  mb_set_deterministic(c.deterministic ? 1 : 0);
  std::ofstream out(OutPath(c, "config.txt"), std::ios::binary);
  if (!out) throw Failure("cannot write " + OutPath(c, "config.txt"));
  // Replay with: minibert --config config.txt <subcommand> [overrides]
  out << "# minibert --config config.txt " << sub->get_name() << "\n"
      << sub->get_parent()->get_config_formatter_base()->to_config(sub, true, false, sub->get_name() + ".");
}

void LoadModel(const std::string& path, const Arch& a, Model& model) {
  Check(mb_model_load(path.c_str(), nullptr, model.out()), "loading " + path);
  mb_model_config expected;
  Check(mb_model_get_config(model.get(), &expected), "reading config of " + path);
  bool constrained = false;
  auto apply = [&](const std::optional<std::size_t>& flag, std::size_t& field) {
    if (flag) {
      field = *flag;
      constrained = true;
    }
  };
  apply(a.hidden_dim, expected.hidden_dim);
  apply(a.num_layers, expected.num_layers);
  apply(a.num_heads, expected.num_heads);
  apply(a.ff_dim, expected.ff_dim);
  apply(a.max_len, expected.max_len);
  if (constrained) Check(mb_model_load(path.c_str(), &expected, model.out()), "loading " + path);
}

struct DataSource {
  std::string data, train, test;
  double train_fraction = 0.75;
};

void AddDataSource(CLI::App* sub, DataSource& d) {
  auto* data = sub->add_option("--data", d.data, "Labeled TSV split into train and test by --train-fraction");
  auto* train = sub->add_option("--train", d.train, "Labeled TSV used for training");
  auto* test = sub->add_option("--test", d.test, "Labeled TSV used for testing");
  sub->add_option("--train-fraction", d.train_fraction, "Training share when --data is split")
      ->check(CLI::Range(0.0, 1.0));
  data->excludes(train)->excludes(test);
  train->needs(test);
  test->needs(train);
}

void CheckDataSource(const DataSource& d) {
  if (d.data.empty() && d.train.empty()) throw CLI::RequiredError("--data or --train/--test");
}

void LoadData(const DataSource& d, std::uint64_t seed, Dataset& train, Dataset& test) {
  if (!d.data.empty()) {
    Dataset all;
    Check(mb_dataset_load_tsv(d.data.c_str(), all.out()), "loading " + d.data);
    Check(mb_dataset_split(all.get(), d.train_fraction, seed, train.out(), test.out()), "splitting " + d.data);
  } else {
    Check(mb_dataset_load_tsv(d.train.c_str(), train.out()), "loading " + d.train);
    Check(mb_dataset_load_tsv(d.test.c_str(), test.out()), "loading " + d.test);
  }
}

std::vector<int> Labels(const mb_dataset* ds) {
  std::vector<int> labels(mb_dataset_size(ds));
  Check(mb_dataset_labels(ds, labels.data(), labels.size()), "reading labels");
  return labels;
}

void WriteScores(const std::string& path, const std::vector<double>& scores, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Failure("cannot write " + path);
  out << "score\tlabel\n";
  char buf[64];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9f\t%d\n", scores[i], labels[i]);
    out << buf;
  }
}

void ReadScores(const std::string& path, std::vector<double>& scores, std::vector<int>& labels) {
  std::ifstream in(path);
  if (!in) throw Failure("cannot read " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("score", 0) == 0)) continue;
    std::istringstream fields(line);
    double s;
    int l;
    if (!(fields >> s >> l)) throw Failure(path + ":" + std::to_string(lineno) + ": expected <score> <label>");
    scores.push_back(s);
    labels.push_back(l);
  }
}

void LogToStderr(int level, const char* message, void*) {
  std::fprintf(stderr, "%s%s\n", level == MB_LOG_WARNING ? "warning: " : "", message);
}

// ---- subcommands ----

struct BuildVocabCmd {
  Common common;
  std::string corpus;
  std::size_t vocab_size = 8000;

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("build-vocab", "Learn a subword vocabulary from a corpus");
    AddCommon(sub, common);
    sub->add_option("--corpus", corpus, "Corpus file, one sentence per line")->required();
    sub->add_option("--vocab-size", vocab_size, "Target vocabulary size including special tokens")
        ->check(CLI::PositiveNumber);
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  void Run(CLI::App* sub) {
    RequireFiles({&corpus});
    Prepare(common, sub);
    Vocab v;
    Check(mb_vocab_build(corpus.c_str(), vocab_size, v.out()), "building vocabulary");
    Check(mb_vocab_save(v.get(), OutPath(common, "vocab.txt").c_str()), "saving vocabulary");
    std::fprintf(stderr, "vocabulary: %zu tokens\n", mb_vocab_size(v.get()));
  }
};

struct PretrainCmd {
  Common common;
  std::string corpus, vocab;
  mb_model_config model{};
  mb_pretrain_options opts{};
  std::string mask_policy;
  bool tie = false;

  PretrainCmd() {
    mb_model_config_default(&model);
    mb_pretrain_options_default(&opts);
    mask_policy = opts.mask_policy;
    tie = model.tie_mlm_weights != 0;
  }

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("pretrain", "Pretrain an encoder with masked-token and next-sentence objectives");
    AddCommon(sub, common);
    sub->add_option("--corpus", corpus, "Corpus file, one sentence per line")->required();
    sub->add_option("--vocab", vocab, "Vocabulary file from build-vocab")->required();
    sub->add_option("--hidden-dim", model.hidden_dim, "Hidden size")->check(CLI::PositiveNumber);
    sub->add_option("--layers", model.num_layers, "Encoder layers");
    sub->add_option("--heads", model.num_heads, "Attention heads")->check(CLI::PositiveNumber);
    sub->add_option("--ff-dim", model.ff_dim, "Feed-forward width")->check(CLI::PositiveNumber);
    sub->add_option("--max-len", model.max_len, "Sequence length and position table size")
        ->check(CLI::PositiveNumber);
    sub->add_option("--dropout", model.dropout, "Dropout rate")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--tie-mlm-weights", tie, "Share the token table with the vocabulary projection");
    sub->add_option("--steps", opts.steps, "Optimizer steps");
    sub->add_option("--batch-size", opts.batch_size, "Sentence pairs per step")->check(CLI::PositiveNumber);
    sub->add_option("--lr", opts.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    sub->add_option("--mask-policy", mask_policy, "Corruption policy")
        ->check(CLI::IsMember({"token", "wwm", "span", "electra"}));
    sub->add_option("--select-rate", opts.select_rate, "Share of positions selected for corruption")
        ->check(CLI::Range(0.0, 1.0));
    sub->add_option("--geo-p", opts.geo_p, "Geometric parameter of span lengths")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--max-span", opts.max_span, "Longest span")->check(CLI::PositiveNumber);
    sub->add_option("--checkpoint-every", opts.checkpoint_every,
                    "Write step_<n>.bin every n steps (0 disables)");
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  static void OnStep(std::size_t step, double total, double mlm, double nsp, double rtd, void* user) {
    const auto steps = *static_cast<const std::size_t*>(user);
    if (step % 50 == 0 || step + 1 == steps) {
      std::fprintf(stderr, "step %zu/%zu total %.4f mlm %.4f nsp %.4f rtd %.4f\n", step, steps, total, mlm, nsp,
                   rtd);
    }
  }

  void Run(CLI::App* sub) {
    RequireFiles({&corpus, &vocab});
    Prepare(common, sub);
    Vocab v;
    Check(mb_vocab_load(vocab.c_str(), v.out()), "loading " + vocab);
    model.vocab_size = mb_vocab_size(v.get());
    model.tie_mlm_weights = tie ? 1 : 0;
    model.rtd_head = mask_policy == "electra" ? 1 : 0;
    Model m;
    Check(mb_model_create(&model, common.seed, m.out()), "creating model");
    const std::string prefix = OutPath(common, "step_");
    opts.seed = common.seed;
    opts.max_len = model.max_len;
    opts.mask_policy = mask_policy.c_str();
    opts.checkpoint_prefix = prefix.c_str();
    Check(mb_pretrain(m.get(), corpus.c_str(), v.get(), &opts, OutPath(common, "loss_log.tsv").c_str(), OnStep,
                      &opts.steps),
          "pretraining");
    Check(mb_model_save(m.get(), OutPath(common, "model.bin").c_str()), "saving model");
  }
};

struct FinetuneCmd {
  Common common;
  std::string checkpoint, vocab;
  DataSource data;
  Arch arch;
  mb_finetune_options opts{};

  FinetuneCmd() { mb_finetune_options_default(&opts); }

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("finetune", "Fine-tune the sentiment head and encoder on labeled sentences");
    AddCommon(sub, common);
    sub->add_option("--checkpoint", checkpoint, "Pretrained model")->required();
    sub->add_option("--vocab", vocab, "Vocabulary file")->required();
    AddDataSource(sub, data);
    AddArchChecks(sub, arch);
    sub->add_option("--lr", opts.lr, "Initial learning rate")->check(CLI::PositiveNumber);
    sub->add_option("--lr-factor", opts.lr_factor, "Factor applied to the rate after a non-improving epoch")
        ->check(CLI::Range(0.0, 1.0));
    sub->add_option("--patience", opts.patience, "Reductions tolerated before stopping")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--epochs", opts.max_epochs, "Epoch limit");
    sub->add_option("--batch-size", opts.batch_size, "Sentences per step")->check(CLI::PositiveNumber);
    sub->add_option("--max-len", opts.max_len, "Sequence length (capped by the checkpoint)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--validation-split", opts.validation_split,
                    "Hold out this share of training data for the rate policy and threshold")
        ->check(CLI::Range(0.0, 1.0));
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  static void OnEpoch(const mb_epoch_record* r, void*) {
    std::fprintf(stderr, "epoch %d train_loss %.4f test_auc %.4f test_f1 %.4f lr %.3e\n", r->epoch, r->train_loss,
                 r->test_auc, r->test_f1, r->lr);
  }

  void Run(CLI::App* sub) {
    CheckDataSource(data);
    RequireFiles({&checkpoint, &vocab, &data.data, &data.train, &data.test});
    Prepare(common, sub);
    Vocab v;
    Check(mb_vocab_load(vocab.c_str(), v.out()), "loading " + vocab);
    Model m;
    LoadModel(checkpoint, arch, m);
    Dataset train, test;
    LoadData(data, common.seed, train, test);
    opts.seed = common.seed;
    Check(mb_finetune(m.get(), v.get(), train.get(), test.get(), &opts, OutPath(common, "epoch_log.tsv").c_str(),
                      OnEpoch, nullptr),
          "fine-tuning");
    Check(mb_model_save(m.get(), OutPath(common, "model.bin").c_str()), "saving model");

    std::vector<double> scores(mb_dataset_size(test.get()));
    Check(mb_predict_sentiment(m.get(), v.get(), test.get(), opts.max_len, scores.data(), scores.size()),
          "scoring test set");
    const std::vector<int> labels = Labels(test.get());
    WriteScores(OutPath(common, "scores.tsv"), scores, labels);
    double t = 0.0, f1 = 0.0;
    Check(mb_threshold_sweep(scores.data(), labels.data(), scores.size(), &t, &f1,
                             OutPath(common, "threshold_report.tsv").c_str()),
          "threshold sweep");
    std::fprintf(stderr, "best threshold %.2f f1 %.4f\n", t, f1);
  }
};

int FeatureKind(const std::string& name) { return name == "cls" ? MB_FEATURES_CLS : MB_FEATURES_BAG_OF_IDS; }

struct ExtractCmd {
  Common common;
  std::string checkpoint, vocab, data, kind = "cls";
  Arch arch;
  std::size_t max_len = 64;

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("extract-features", "Write frozen-encoder sentence features and labels");
    AddCommon(sub, common);
    sub->add_option("--checkpoint", checkpoint, "Model (needed for cls features)");
    sub->add_option("--vocab", vocab, "Vocabulary file")->required();
    sub->add_option("--data", data, "Labeled TSV")->required();
    sub->add_option("--kind", kind, "Feature kind")->check(CLI::IsMember({"cls", "bag-of-ids"}));
    sub->add_option("--max-len", max_len, "Sequence length (capped by the checkpoint)")->check(CLI::PositiveNumber);
    AddArchChecks(sub, arch);
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  void Run(CLI::App* sub) {
    if (kind == "cls" && checkpoint.empty()) throw CLI::RequiredError("--checkpoint (for --kind cls)");
    RequireFiles({&checkpoint, &vocab, &data});
    Prepare(common, sub);
    Vocab v;
    Check(mb_vocab_load(vocab.c_str(), v.out()), "loading " + vocab);
    Model m;
    if (!checkpoint.empty()) LoadModel(checkpoint, arch, m);
    Dataset ds;
    Check(mb_dataset_load_tsv(data.c_str(), ds.out()), "loading " + data);
    Features f;
    Check(mb_features_extract(m.get(), v.get(), ds.get(), max_len, FeatureKind(kind), f.out()),
          "extracting features");
    Check(mb_features_save(f.get(), OutPath(common, "features.txt").c_str(), OutPath(common, "labels.txt").c_str()),
          "saving features");
    std::fprintf(stderr, "features: %zu x %zu\n", mb_features_rows(f.get()), mb_features_cols(f.get()));
  }
};

struct TrainLrCmd {
  Common common;
  std::string features, labels;
  mb_logreg_options opts{};

  TrainLrCmd() { mb_logreg_options_default(&opts); }

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("train-lr", "Fit logistic regression on extracted features");
    AddCommon(sub, common);
    sub->add_option("--features", features, "Feature file from extract-features")->required();
    sub->add_option("--labels", labels, "Label file from extract-features")->required();
    sub->add_option("--lr", opts.lr, "Gradient step size")->check(CLI::PositiveNumber);
    sub->add_option("--steps", opts.steps, "Full-batch gradient steps");
    sub->add_option("--l2", opts.l2, "L2 penalty")->check(CLI::NonNegativeNumber);
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  void Run(CLI::App* sub) {
    RequireFiles({&features, &labels});
    Prepare(common, sub);
    Features f;
    Check(mb_features_load(features.c_str(), labels.c_str(), f.out()), "loading features");
    LogReg lr;
    Check(mb_logreg_train(f.get(), &opts, OutPath(common, "lr_loss.tsv").c_str(), lr.out()),
          "training logistic regression");
    Check(mb_logreg_save(lr.get(), OutPath(common, "logreg.txt").c_str()), "saving logistic regression");
    std::vector<double> scores(mb_features_rows(f.get()));
    Check(mb_logreg_predict(lr.get(), f.get(), scores.data(), scores.size()), "scoring");
  }
};

struct EvaluateCmd {
  Common common;
  std::string checkpoint, vocab, kind = "cls";
  DataSource data;
  Arch arch;
  std::size_t max_len = 64;
  mb_logreg_options opts{};

  EvaluateCmd() { mb_logreg_options_default(&opts); }

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("evaluate", "Frozen encoder plus logistic regression, scored on the test half");
    AddCommon(sub, common);
    sub->add_option("--checkpoint", checkpoint, "Pretrained model")->required();
    sub->add_option("--vocab", vocab, "Vocabulary file")->required();
    AddDataSource(sub, data);
    sub->add_option("--kind", kind, "Feature kind")->check(CLI::IsMember({"cls", "bag-of-ids"}));
    sub->add_option("--max-len", max_len, "Sequence length (capped by the checkpoint)")->check(CLI::PositiveNumber);
    sub->add_option("--lr", opts.lr, "Logistic regression step size")->check(CLI::PositiveNumber);
    sub->add_option("--steps", opts.steps, "Logistic regression steps");
    sub->add_option("--l2", opts.l2, "L2 penalty")->check(CLI::NonNegativeNumber);
    AddArchChecks(sub, arch);
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  void Run(CLI::App* sub) {
    CheckDataSource(data);
    RequireFiles({&checkpoint, &vocab, &data.data, &data.train, &data.test});
    Prepare(common, sub);
    Vocab v;
    Check(mb_vocab_load(vocab.c_str(), v.out()), "loading " + vocab);
    Model m;
    LoadModel(checkpoint, arch, m);
    Dataset train, test;
    LoadData(data, common.seed, train, test);
    mb_pipeline_report r;
    Check(mb_evaluate_pipeline(train.get(), test.get(), m.get(), v.get(), max_len, &opts, FeatureKind(kind),
                               OutPath(common, "report.txt").c_str(), &r),
          "evaluating");
    std::fprintf(stderr, "accuracy %.4f (majority baseline %.4f) auc %.4f\n", r.accuracy, r.majority_baseline,
                 r.auc);
  }
};

struct SweepCmd {
  Common common;
  std::string scores_path, checkpoint, vocab, data;
  Arch arch;
  std::size_t max_len = 64;

  void Register(CLI::App& app, std::function<void()>& run) {
    auto* sub = app.add_subcommand("sweep-threshold", "F1 at thresholds 0.01 to 0.99 and the best one");
    AddCommon(sub, common);
    auto* scores = sub->add_option("--scores", scores_path, "score<TAB>label file such as finetune's scores.tsv");
    auto* ckpt = sub->add_option("--checkpoint", checkpoint, "Fine-tuned model to score --data with");
    sub->add_option("--vocab", vocab, "Vocabulary file (with --checkpoint)");
    sub->add_option("--data", data, "Labeled TSV (with --checkpoint)");
    sub->add_option("--max-len", max_len, "Sequence length (capped by the checkpoint)")->check(CLI::PositiveNumber);
    AddArchChecks(sub, arch);
    scores->excludes(ckpt);
    sub->callback([this, sub, &run] { run = [this, sub] { Run(sub); }; });
  }

  void Run(CLI::App* sub) {
    if (scores_path.empty() && (checkpoint.empty() || vocab.empty() || data.empty())) {
      throw CLI::RequiredError("--scores or all of --checkpoint, --vocab and --data");
    }
    RequireFiles({&scores_path, &checkpoint, &vocab, &data});
    Prepare(common, sub);
    std::vector<double> scores;
    std::vector<int> labels;
    if (!scores_path.empty()) {
      ReadScores(scores_path, scores, labels);
    } else {
      Vocab v;
      Check(mb_vocab_load(vocab.c_str(), v.out()), "loading " + vocab);
      Model m;
      LoadModel(checkpoint, arch, m);
      Dataset ds;
      Check(mb_dataset_load_tsv(data.c_str(), ds.out()), "loading " + data);
      scores.resize(mb_dataset_size(ds.get()));
      Check(mb_predict_sentiment(m.get(), v.get(), ds.get(), max_len, scores.data(), scores.size()), "scoring");
      labels = Labels(ds.get());
    }
    double t = 0.0, f1 = 0.0;
    Check(mb_threshold_sweep(scores.data(), labels.data(), scores.size(), &t, &f1,
                             OutPath(common, "threshold_report.tsv").c_str()),
          "threshold sweep");
    std::fprintf(stderr, "best threshold %.2f f1 %.4f\n", t, f1);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minibert: small BERT-style encoder toolkit"};
  app.name("minibert");
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mb_version()));
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Read subcommand options from a key=value file such as a resolved config.txt");

  std::function<void()> run;
  BuildVocabCmd build_vocab;
  PretrainCmd pretrain;
  FinetuneCmd finetune;
  ExtractCmd extract;
  TrainLrCmd train_lr;
  EvaluateCmd evaluate;
  SweepCmd sweep;
  build_vocab.Register(app, run);
  pretrain.Register(app, run);
  finetune.Register(app, run);
  extract.Register(app, run);
  train_lr.Register(app, run);
  evaluate.Register(app, run);
  sweep.Register(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  mb_set_log_callback(LogToStderr, nullptr);
  try {
    run();
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\nRun with --help for more information.\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return 0;
}
